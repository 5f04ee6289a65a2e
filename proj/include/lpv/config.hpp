#pragma once

// Pipeline configuration: one JSON document with sections
//   seed, corpus, encoder, vq, predictor, predict, metrics, paths
// Sub-section seeds are derived from the global seed and may not be set.
// Unknown keys are rejected. Overrides use dot paths ("encoder.hidden=16").

#include "json.hpp"
#include "lpv/corpus.hpp"
#include "lpv/lpv_predictor.hpp"
#include "lpv/metrics.hpp"
#include "lpv/prosody_encoder.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace lpv {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthesisParams, vocab_size, n_clusters, n_classes, n_low_bands, n_bands,
                                                noise_sigma, mean_scale, style_spread, class_stickiness, dur_base,
                                                dur_step, dur_word_jitter, dur_sigma, pitch_base_hz, pitch_step_hz,
                                                pitch_slope_hz, pitch_noise_hz, min_words, max_words, corrupt_fraction,
                                                corrupt_amplitude, filler_sigma, seed)

struct CorpusSection {
  SynthesisParams synth;
  int n_text = 1000;
  int n_low = 400;
  int n_train = 120;
  int n_valid = 40;
  int n_test = 40;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CorpusSection, synth, n_text, n_low, n_train, n_valid, n_test)

struct VqSection {
  int K = 16;
  double gamma = 0.99;
  double eps = 1e-5;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VqSection, K, gamma, eps)

struct PredictSection {
  std::string mode = "greedy";
  double temperature = 1.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PredictSection, mode, temperature)

struct MetricsSection {
  std::string dtw_cost = "absolute";  // or "log"
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MetricsSection, dtw_cost)

struct PathsSection {
  std::string root = "work";
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PathsSection, root)

struct PipelineConfig {
  std::uint64_t seed = 1;
  CorpusSection corpus;
  EncoderConfig encoder;
  VqSection vq;
  PredictorConfig predictor;
  PredictSection predict;
  MetricsSection metrics;
  PathsSection paths;
};

namespace detail {

inline nlohmann::json without_seed(nlohmann::json j) {
  j.erase("seed");
  return j;
}

/// Fails on any key of `given` that the schema `known` lacks.
inline void reject_unknown(const nlohmann::json& given, const nlohmann::json& known, const std::string& prefix) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!known.contains(it.key())) fail<ConfigError>("unknown config key \"", path, "\"");
    if (known.at(it.key()).is_object()) {
      if (!it.value().is_object()) fail<ConfigError>("config key \"", path, "\" must be an object");
      reject_unknown(it.value(), known.at(it.key()), path);
    }
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  nlohmann::json corpus = c.corpus;
  corpus["synth"].erase("seed");
  j = {{"seed", c.seed},
       {"corpus", corpus},
       {"encoder", detail::without_seed(c.encoder)},
       {"vq", c.vq},
       {"predictor", detail::without_seed(c.predictor)},
       {"predict", c.predict},
       {"metrics", c.metrics},
       {"paths", c.paths}};
}

/// Derives every sub-seed from the global seed.
inline void derive_seeds(PipelineConfig& c) {
  c.corpus.synth.seed = substream(c.seed, "synthetic-spec");
  c.encoder.seed = substream(c.seed, "encoder");
  c.predictor.seed = substream(c.seed, "predictor");
}

inline DtwCost dtw_cost(const PipelineConfig& c) {
  return c.metrics.dtw_cost == "log" ? DtwCost::log_absolute : DtwCost::absolute;
}

inline DecodeMode decode_mode(const PipelineConfig& c) {
  return c.predict.mode == "sample" ? DecodeMode::sample : DecodeMode::greedy;
}

inline void validate(const PipelineConfig& c) {
  auto bad = [](auto&&... a) { fail<ConfigError>(a...); };
  const auto& s = c.corpus.synth;
  if (c.corpus.n_text < 1 || c.corpus.n_low < 1 || c.corpus.n_train < 1 || c.corpus.n_valid < 1 || c.corpus.n_test < 1)
    bad("corpus sizes must be >= 1");
  if (s.n_low_bands > s.n_bands) bad("corpus.synth.n_low_bands exceeds n_bands");
  if (s.noise_sigma < 0.0) bad("corpus.synth.noise_sigma must be >= 0");
  if (s.min_words < 1 || s.max_words < s.min_words) bad("corpus.synth word counts are inconsistent");
  validate(c.encoder);
  validate(c.predictor);
  if (c.encoder.n_low_bands > s.n_bands) bad("encoder.n_low_bands exceeds corpus.synth.n_bands");
  if (c.vq.K < 1) bad("vq.K must be positive");
  if (c.vq.K != c.predictor.K) bad("vq.K=", c.vq.K, " but predictor.K=", c.predictor.K);
  if (c.predictor.vocab_size != s.vocab_size)
    bad("predictor.vocab_size=", c.predictor.vocab_size, " but corpus.synth.vocab_size=", s.vocab_size);
  if (c.predictor.max_len < s.max_words) bad("predictor.max_len is shorter than corpus.synth.max_words");
  if (!(c.vq.gamma > 0.0 && c.vq.gamma <= 1.0) || c.vq.eps < 0.0) bad("vq.gamma must lie in (0, 1] and vq.eps >= 0");
  if (c.predict.mode != "greedy" && c.predict.mode != "sample") bad("predict.mode must be greedy or sample");
  if (!(c.predict.temperature > 0.0)) bad("predict.temperature must be positive");
  if (c.metrics.dtw_cost != "absolute" && c.metrics.dtw_cost != "log") bad("metrics.dtw_cost must be absolute or log");
  if (c.paths.root.empty()) bad("paths.root must not be empty");
}

/// Parses a config document (missing keys keep their defaults).
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail<ConfigError>("config must be a JSON object");
  detail::reject_unknown(j, nlohmann::json(PipelineConfig{}), "");
  PipelineConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("corpus")) {
      nlohmann::json merged = c.corpus;
      merged.merge_patch(j.at("corpus"));
      c.corpus = merged.get<CorpusSection>();
    }
    auto section = [&](const char* key, auto& target) {
      if (!j.contains(key)) return;
      nlohmann::json merged = target;
      merged.merge_patch(j.at(key));
      target = merged.get<std::decay_t<decltype(target)>>();
    };
    section("encoder", c.encoder);
    section("vq", c.vq);
    section("predictor", c.predictor);
    section("predict", c.predict);
    section("metrics", c.metrics);
    section("paths", c.paths);
  } catch (const nlohmann::json::exception& e) {
    fail<ConfigError>("config: ", e.what());
  }
  derive_seeds(c);
  validate(c);
  return c;
}

/// Applies "a.b.c=value" (value parsed as JSON, else taken as a string).
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail<ConfigError>("override \"", assignment, "\" is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  const nlohmann::json schema = PipelineConfig{};
  const nlohmann::json* known = &schema;
  nlohmann::json* node = &doc;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (!known->is_object() || !known->contains(path[i])) fail<ConfigError>("unknown config key \"", key, "\"");
    known = &known->at(path[i]);
    if (i + 1 == path.size()) {
      (*node)[path[i]] = value;
    } else {
      if (!node->contains(path[i])) (*node)[path[i]] = nlohmann::json::object();
      node = &(*node)[path[i]];
    }
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail<ConfigError>(path.string(), ": cannot open config");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail<ConfigError>(path.string(), ": ", e.what());
  }
}

/// Loads `path` (empty = defaults) and applies overrides in order.
inline PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json doc = path.empty() ? nlohmann::json::object() : read_json_file(path);
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

// ---------------------------------------------------------------------------
// Hashes

enum class Stage { corpus, encoder, text, audio, finetune, predict, evaluate };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::corpus: return "corpus";
    case Stage::encoder: return "encoder";
    case Stage::text: return "text_pretrain";
    case Stage::audio: return "audio_pretrain";
    case Stage::finetune: return "finetune";
    case Stage::predict: return "predict";
    case Stage::evaluate: return "evaluate";
  }
  return "?";
}

/// Whole-config hash; paths are excluded so relocated workspaces agree.
inline std::string config_hash(const PipelineConfig& c) {
  nlohmann::json j = c;
  j.erase("paths");
  return hex64(fnv1a(j.dump()));
}

/// Hash of the config fields that can influence the artifacts of `stage`.
/// Predictor stages include the declared stage list, so toggling a
/// pretraining stage changes every predictor hash but none upstream.
inline std::string stage_hash(const PipelineConfig& c, Stage stage) {
  const nlohmann::json full = c;
  nlohmann::json j = {{"seed", c.seed}, {"corpus", full.at("corpus")}};
  if (stage != Stage::corpus) {
    j["encoder"] = full.at("encoder");
    j["vq"] = full.at("vq");
  }
  if (stage == Stage::text) {
    nlohmann::json p = full.at("predictor");
    p.erase("audio_steps");
    p.erase("finetune_steps");
    j["predictor"] = p;
  } else if (stage == Stage::audio || stage == Stage::finetune || stage == Stage::predict || stage == Stage::evaluate) {
    j["predictor"] = full.at("predictor");
    if (stage == Stage::predict || stage == Stage::evaluate) j["predict"] = full.at("predict");
    if (stage == Stage::evaluate) j["metrics"] = full.at("metrics");
  }
  return hex64(fnv1a(j.dump()));
}

}  // namespace lpv
