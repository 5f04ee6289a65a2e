#pragma once

// Pipeline stages over a fixed workspace layout:
//
//   <root>/corpus/{text,low,train,valid,test}/   manifests, features, labels, prosody
//   <root>/checkpoints/                          encoder.lpvm, codebook.lpvq, predictor_<stage>.lpvm
//   <root>/lpv/                                  extracted and predicted LPVs, rendered prosody
//   <root>/reports/<stage>.json                  machine-readable run reports
//
// Every artifact carries the hash of the config fields that produced it
// (config_hash) and of the corpus it derives from (corpus_hash). Consumers
// refuse artifacts whose hashes disagree with the current config unless
// `force` is set. Reports carry a report_hash over everything except wall time.

#include "lpv/config.hpp"
#include "lpv/log.hpp"
#include "lpv/render.hpp"

#include <chrono>
#include <map>
#include <set>

namespace lpv {

namespace fs = std::filesystem;

struct Workspace {
  fs::path root;

  fs::path corpus(const std::string& name) const { return root / "corpus" / name; }
  fs::path manifest(const std::string& name) const { return corpus(name) / "manifest.jsonl"; }
  fs::path checkpoint(const std::string& file) const { return root / "checkpoints" / file; }
  fs::path lpv(const std::string& file) const { return root / "lpv" / file; }
  fs::path report(const std::string& stage) const { return root / "reports" / (stage + ".json"); }
  fs::path encoder() const { return checkpoint("encoder.lpvm"); }
  fs::path codebook() const { return checkpoint("codebook.lpvq"); }
  fs::path predictor(StageTag s) const { return checkpoint("predictor_" + to_string(s) + ".lpvm"); }
};

struct RunOptions {
  bool force = false;       // accept artifacts from a different config
  bool allow_skip = false;  // let predictor stages run without declared predecessors
};

inline const std::vector<std::string>& corpus_names() {
  static const std::vector<std::string> names = {"text", "low", "train", "valid", "test"};
  return names;
}

inline const std::vector<std::string>& acoustic_corpora() {
  static const std::vector<std::string> names = {"low", "train", "valid", "test"};
  return names;
}

// ---------------------------------------------------------------------------
// Reports

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string report_hash(nlohmann::json report) {
  report.erase("wall_time_s");
  report.erase("report_hash");
  return hex64(fnv1a(report.dump()));
}

inline nlohmann::json config_echo(const PipelineConfig& cfg) {
  nlohmann::json j = cfg;
  j.erase("paths");
  return j;
}

/// Stamps and writes a report; returns the stamped document.
inline nlohmann::json write_report(const Workspace& ws, const PipelineConfig& cfg, const std::string& stage,
                                   const std::string& hash, nlohmann::json body, double wall) {
  body["stage"] = stage;
  body["seed"] = cfg.seed;
  body["config_hash"] = config_hash(cfg);
  body["stage_hash"] = hash;
  body["wall_time_s"] = wall;
  body["report_hash"] = report_hash(body);
  io::write_file(ws.report(stage), body.dump(2) + "\n");
  log::info(stage, ": report ", ws.report(stage).string(), " hash ", body["report_hash"].get<std::string>());
  return body;
}

inline nlohmann::json read_report(const fs::path& path) {
  try {
    return nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail<FormatError>(path.string(), ": ", e.what());
  }
}

inline nlohmann::json digests(const Workspace& ws, const std::vector<fs::path>& files) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : files) j[fs::relative(f, ws.root).generic_string()] = io::file_digest(f);
  return j;
}

inline nlohmann::json usage_json(const UsageStats& u) {
  return {{"perplexity", u.perplexity}, {"active_codes", u.active_codes}, {"histogram", u.histogram}};
}

// ---------------------------------------------------------------------------
// Provenance checks

inline void require_exists(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) fail<StageOrderError>(path.string(), " is missing; run ", producer, " first");
}

inline void check_hash(const std::string& what, const std::string& found, const std::string& expected,
                       const RunOptions& opt) {
  if (found == expected) return;
  if (opt.force) {
    log::warn(what, ": config hash ", found.empty() ? "<none>" : found, " differs from ", expected, " (forced)");
    return;
  }
  fail<ConfigError>(what, " was produced by config ", found.empty() ? "<none>" : found, ", current config expects ",
                    expected, "; rerun the producing stage or pass --force");
}

inline Provenance provenance(const PipelineConfig& cfg, Stage stage) {
  return {stage_hash(cfg, stage), stage_hash(cfg, Stage::corpus)};
}

inline CorpusManifest open_corpus(const Workspace& ws, const PipelineConfig& cfg, const std::string& name,
                                  const RunOptions& opt) {
  require_exists(ws.manifest(name), "gen-corpus");
  CorpusManifest m = load_manifest(ws.manifest(name));
  check_hash("corpus/" + name, m.provenance.config_hash, stage_hash(cfg, Stage::corpus), opt);
  return m;
}

inline std::vector<LpvSequence> open_lpv(const fs::path& path, const std::string& expected, const std::string& producer,
                                         const RunOptions& opt) {
  require_exists(path, producer);
  Provenance p;
  auto seqs = read_lpv(path, &p);
  check_hash(path.filename().string(), p.config_hash, expected, opt);
  return seqs;
}

/// Loads acoustic utterances together with their pitch contours.
inline std::vector<Utterance> load_with_pitch(const Workspace& ws, const CorpusManifest& m, const std::string& name) {
  auto utts = load_utterances(m);
  const ProsodyFile pros = read_prosody(ws.corpus(name) / "prosody.jsonl");
  std::map<std::string, const PitchRecord*> by_id;
  for (const auto& p : pros.pitch) by_id[p.utt_id] = &p;
  for (auto& u : utts) {
    if (u.quality == Quality::text_only) continue;
    auto it = by_id.find(u.id);
    if (it == by_id.end()) fail<FormatError>(name, ": no pitch record for ", u.id);
    u.pitch = it->second->pitch;
    u.voiced = it->second->voiced;
  }
  return utts;
}

inline std::vector<WordSequence> word_sequences(const CorpusManifest& m) {
  std::vector<WordSequence> out;
  for (const auto& e : m.utterances) out.push_back({e.id, e.words});
  return out;
}

/// Pairs manifest words with LPVs (by utterance id); `lpv == nullptr` gives
/// word-only examples.
inline std::vector<PredictorExample> predictor_examples(const CorpusManifest& m, const std::vector<LpvSequence>* lpv) {
  std::map<std::string, const LpvSequence*> by_id;
  if (lpv)
    for (const auto& s : *lpv) by_id[s.utt_id] = &s;
  std::vector<PredictorExample> out;
  for (const auto& e : m.utterances) {
    PredictorExample ex{e.id, e.words, {}};
    if (lpv) {
      auto it = by_id.find(e.id);
      if (it == by_id.end()) fail<FormatError>(e.id, ": no LPV sequence");
      if (it->second->indices.size() != e.words.size()) fail<FormatError>(e.id, ": LPV length differs from word count");
      ex.lpv = it->second->indices;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

/// Purity of codes against sidecar cluster labels.
inline nlohmann::json code_agreement(const std::vector<LpvSequence>& lpv, const std::vector<ClusterLabel>& labels, int k,
                                     int n_clusters) {
  std::map<std::string, std::vector<int>> truth;
  for (const auto& l : labels) {
    auto& v = truth[l.utt_id];
    if (static_cast<int>(v.size()) <= l.word_index) v.resize(static_cast<std::size_t>(l.word_index) + 1, -1);
    v[static_cast<std::size_t>(l.word_index)] = l.cluster;
  }
  std::vector<int> codes, clusters;
  for (const auto& s : lpv) {
    auto it = truth.find(s.utt_id);
    if (it == truth.end() || it->second.size() != s.indices.size()) fail<FormatError>(s.utt_id, ": labels do not match LPVs");
    codes.insert(codes.end(), s.indices.begin(), s.indices.end());
    clusters.insert(clusters.end(), it->second.begin(), it->second.end());
  }
  return {{"bijective_purity", bijective_purity(codes, clusters, k, n_clusters)},
          {"majority_purity", majority_purity(codes, clusters, k, n_clusters)},
          {"n_words", codes.size()}};
}

// ---------------------------------------------------------------------------
// gen-corpus

inline SyntheticSpec pipeline_spec(const PipelineConfig& cfg) { return make_synthetic_spec(cfg.corpus.synth); }

inline Quality corpus_quality(const std::string& name) {
  if (name == "text") return Quality::text_only;
  if (name == "low") return Quality::low;
  return Quality::high;
}

inline int corpus_size(const PipelineConfig& cfg, const std::string& name) {
  if (name == "text") return cfg.corpus.n_text;
  if (name == "low") return cfg.corpus.n_low;
  if (name == "train") return cfg.corpus.n_train;
  if (name == "valid") return cfg.corpus.n_valid;
  return cfg.corpus.n_test;
}

/// Generates one corpus into `dir`; ids are "<name>_NNNNNN".
inline CorpusManifest generate_named_corpus(const PipelineConfig& cfg, const SyntheticSpec& spec, const std::string& name,
                                            Quality quality, int n, Split split, const fs::path& dir) {
  GeneratedCorpus g = generate_corpus(spec, n, quality, substream(cfg.seed, "corpus/" + name), name);
  for (auto& u : g.utterances) u.split = split;
  if (fs::exists(dir)) fs::remove_all(dir);
  return write_corpus(dir, g, spec.vocab_size, spec.n_bands, provenance(cfg, Stage::corpus));
}

inline nlohmann::json gen_corpus(const Workspace& ws, const PipelineConfig& cfg) {
  Stopwatch sw;
  const SyntheticSpec spec = pipeline_spec(cfg);
  nlohmann::json body;
  std::vector<fs::path> files;
  for (const auto& name : corpus_names()) {
    const Split split = name == "valid" ? Split::valid : name == "test" ? Split::test : Split::train;
    const CorpusManifest m =
        generate_named_corpus(cfg, spec, name, corpus_quality(name), corpus_size(cfg, name), split, ws.corpus(name));
    std::vector<long> hist(static_cast<std::size_t>(spec.n_clusters), 0);
    for (const auto& l : read_labels(ws.corpus(name) / "labels.jsonl")) ++hist[static_cast<std::size_t>(l.cluster)];
    long words = 0;
    for (const auto& e : m.utterances) words += e.n_words;
    body["corpora"][name] = {{"utterances", m.utterances.size()}, {"words", words}, {"quality", to_string(corpus_quality(name))},
                             {"cluster_histogram", hist}};
    for (const char* f : {"manifest.jsonl", "labels.jsonl", "prosody.jsonl"}) files.push_back(ws.corpus(name) / f);
    log::info("gen-corpus: ", name, " ", m.utterances.size(), " utterances");
  }
  body["artifacts"] = digests(ws, files);
  return write_report(ws, cfg, "gen-corpus", stage_hash(cfg, Stage::corpus), body, sw.seconds());
}

// ---------------------------------------------------------------------------
// train-encoder

inline std::vector<EncoderInput> encoder_inputs(const std::vector<Utterance>& utts, int n_low_bands) {
  std::vector<EncoderInput> out;
  for (const auto& u : utts)
    if (u.quality != Quality::text_only) out.push_back(make_encoder_input(u, n_low_bands));
  return out;
}

inline nlohmann::json train_encoder_stage(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt) {
  Stopwatch sw;
  const CorpusManifest m = open_corpus(ws, cfg, "train", opt);
  const auto utts = load_utterances(m);
  const auto data = encoder_inputs(utts, cfg.encoder.n_low_bands);
  ProsodyAutoencoder model(cfg.encoder);
  Codebook cb = make_codebook(cfg.vq.K, cfg.encoder.code_dim, cfg.vq.gamma, cfg.vq.eps);
  const int every = std::max(1, cfg.encoder.total_steps / 10);
  const auto history = train_encoder(model, cb, data, [&](const StepStats& s) {
    if ((s.step + 1) % every == 0 || s.step == cfg.encoder.warmup_steps)
      log::info("train-encoder: step ", s.step, " ", to_string(s.phase), " recon ", s.recon, " commit ", s.commit);
  });

  const Provenance prov = provenance(cfg, Stage::encoder);
  save_encoder(ws.encoder(), model, {{"config_hash", prov.config_hash}, {"corpus_hash", prov.corpus_hash}});
  save_codebook(cb, ws.codebook());

  // Statistics come from the stored (f32) artifacts, exactly what later stages see.
  ProsodyAutoencoder stored = load_encoder(ws.encoder());
  const Codebook stored_cb = load_codebook(ws.codebook());
  UsageStats usage;
  const auto lpv = extract_lpv(stored, stored_cb, utts, &usage);
  const auto labels = read_labels(ws.corpus("train") / "labels.jsonl");

  auto tail_mean = [&](auto field) {
    const std::size_t n = std::min<std::size_t>(100, history.size());
    double s = 0.0;
    for (std::size_t i = history.size() - n; i < history.size(); ++i) s += field(history[i]);
    return s / static_cast<double>(n);
  };
  nlohmann::json body;
  body["steps"] = history.size();
  body["warmup_steps"] = cfg.encoder.warmup_steps;
  body["codebook_init"] = cfg.encoder.kmeans_init ? "kmeans" : "random";
  body["final_losses"] = {{"total", tail_mean([](const StepStats& s) { return s.total; })},
                          {"recon", tail_mean([](const StepStats& s) { return s.recon; })},
                          {"commit", tail_mean([](const StepStats& s) { return s.commit; })}};
  body["usage"] = usage_json(usage);
  body["agreement"] = code_agreement(lpv, labels, cfg.vq.K, cfg.corpus.synth.n_clusters);
  body["artifacts"] = digests(ws, {ws.encoder(), ws.codebook()});
  return write_report(ws, cfg, "train-encoder", prov.config_hash, body, sw.seconds());
}

// ---------------------------------------------------------------------------
// extract-lpv

struct LoadedEncoder {
  ProsodyAutoencoder model;
  Codebook codebook;
};

inline LoadedEncoder open_encoder(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt) {
  require_exists(ws.encoder(), "train-encoder");
  require_exists(ws.codebook(), "train-encoder");
  nlohmann::json header;
  ProsodyAutoencoder model = load_encoder(ws.encoder(), &header);
  check_hash("encoder checkpoint", header.value("config_hash", std::string{}), stage_hash(cfg, Stage::encoder), opt);
  Codebook cb = load_codebook(ws.codebook());
  if (cb.K != cfg.vq.K && !opt.force) fail<ConfigError>("codebook has K=", cb.K, " but config says ", cfg.vq.K);
  return {std::move(model), std::move(cb)};
}

/// Extracts LPVs for the named workspace corpora (all acoustic ones when
/// `names` is empty).
inline nlohmann::json extract_lpv_stage(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt,
                                        std::vector<std::string> names = {}) {
  Stopwatch sw;
  if (names.empty()) names = acoustic_corpora();
  auto enc = open_encoder(ws, cfg, opt);
  const Provenance prov = provenance(cfg, Stage::encoder);
  nlohmann::json body;
  std::vector<fs::path> files;
  for (const auto& name : names) {
    const CorpusManifest m = open_corpus(ws, cfg, name, opt);
    const auto utts = load_utterances(m);
    UsageStats usage;
    const auto lpv = extract_lpv(enc.model, enc.codebook, utts, &usage);
    if (lpv.empty()) fail<ValidationError>("extract-lpv: corpus ", name, " has no acoustic utterances");
    write_lpv(ws.lpv(name + ".jsonl"), lpv, prov);
    files.push_back(ws.lpv(name + ".jsonl"));
    body["corpora"][name] = {{"usage", usage_json(usage)},
                             {"agreement", code_agreement(lpv, read_labels(ws.corpus(name) / "labels.jsonl"), cfg.vq.K,
                                                          cfg.corpus.synth.n_clusters)}};
    log::info("extract-lpv: ", name, " perplexity ", usage.perplexity, " active ", usage.active_codes);
  }
  body["artifacts"] = digests(ws, files);
  return write_report(ws, cfg, "extract-lpv", prov.config_hash, body, sw.seconds());
}

/// Extraction from an arbitrary manifest to an arbitrary output file.
inline UsageStats extract_lpv_to(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt,
                                 const fs::path& manifest, const fs::path& out) {
  auto enc = open_encoder(ws, cfg, opt);
  const CorpusManifest m = load_manifest(manifest);
  check_hash(manifest.string(), m.provenance.config_hash, stage_hash(cfg, Stage::corpus), opt);
  UsageStats usage;
  const auto lpv = extract_lpv(enc.model, enc.codebook, load_utterances(m), &usage);
  write_lpv(out, lpv, provenance(cfg, Stage::encoder));
  return usage;
}

// ---------------------------------------------------------------------------
// Predictor stages

inline Stage pipeline_stage(StageTag t) {
  switch (t) {
    case StageTag::text_pretrain: return Stage::text;
    case StageTag::audio_pretrain: return Stage::audio;
    case StageTag::finetune: return Stage::finetune;
  }
  return Stage::finetune;
}

inline std::vector<StageTag> declared_stages(const PipelineConfig& cfg) {
  std::vector<StageTag> out;
  for (const auto& s : cfg.predictor.stages) out.push_back(parse_stage(s));
  return out;
}

inline std::string stage_command(StageTag t) {
  switch (t) {
    case StageTag::text_pretrain: return "pretrain-text";
    case StageTag::audio_pretrain: return "pretrain-audio";
    case StageTag::finetune: return "finetune";
  }
  return "?";
}

/// Loads the checkpoint of the last declared stage.
inline LpvPredictor open_final_predictor(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt) {
  const auto stages = declared_stages(cfg);
  if (stages.empty()) fail<ConfigError>("predictor.stages is empty");
  const StageTag last = stages.back();
  require_exists(ws.predictor(last), stage_command(last));
  nlohmann::json header;
  LpvPredictor model = load_predictor(ws.predictor(last), &header);
  check_hash(ws.predictor(last).filename().string(), header.value("config_hash", std::string{}),
             stage_hash(cfg, pipeline_stage(last)), opt);
  return model;
}

inline std::vector<PredictorExample> heldout_examples(const Workspace& ws, const PipelineConfig& cfg,
                                                      const std::string& name, const RunOptions& opt) {
  const auto lpv = open_lpv(ws.lpv(name + ".jsonl"), stage_hash(cfg, Stage::encoder), "extract-lpv", opt);
  return predictor_examples(open_corpus(ws, cfg, name, opt), &lpv);
}

inline nlohmann::json predictor_stage(const Workspace& ws, const PipelineConfig& cfg, StageTag tag, const RunOptions& opt) {
  Stopwatch sw;
  const std::string command = stage_command(tag);
  const auto declared = declared_stages(cfg);
  const auto pos = std::find(declared.begin(), declared.end(), tag);
  if (pos == declared.end())
    fail<ConfigError>(command, ": stage ", to_string(tag), " is not declared in predictor.stages");

  std::optional<LpvPredictor> model;
  std::string started_from = "scratch";
  if (pos != declared.begin()) {
    const StageTag prev = *(pos - 1);
    const fs::path ck = ws.predictor(prev);
    if (fs::exists(ck)) {
      nlohmann::json header;
      model.emplace(load_predictor(ck, &header));
      check_hash(ck.filename().string(), header.value("config_hash", std::string{}), stage_hash(cfg, pipeline_stage(prev)),
                 opt);
      started_from = to_string(prev);
    } else if (!opt.allow_skip) {
      fail<StageOrderError>(command, ": declared stage ", to_string(prev), " has no checkpoint (", ck.string(),
                            "); run ", stage_command(prev), " first or pass --allow-skip");
    }
  }
  if (!model) model.emplace(cfg.predictor);
  check_stage_order(cfg.predictor.stages, model->stages(), tag, opt.allow_skip);

  std::vector<PredictorExample> data;
  int steps = 0;
  if (tag == StageTag::text_pretrain) {
    data = predictor_examples(open_corpus(ws, cfg, "text", opt), nullptr);
    steps = cfg.predictor.text_steps;
  } else {
    const std::string name = tag == StageTag::audio_pretrain ? "low" : "train";
    data = heldout_examples(ws, cfg, name, opt);
    steps = tag == StageTag::audio_pretrain ? cfg.predictor.audio_steps : cfg.predictor.finetune_steps;
  }
  const auto valid = heldout_examples(ws, cfg, "valid", opt);
  const auto test = heldout_examples(ws, cfg, "test", opt);
  const double initial_valid = heldout_cross_entropy(*model, valid);
  const double initial_test = heldout_cross_entropy(*model, test);

  PredictorStageTrainer trainer(*model, tag);
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(steps));
  const int every = std::max(1, steps / 5);
  for (int s = 0; s < steps; ++s) {
    losses.push_back(trainer.step(trainer.next_batch(data)));
    if ((s + 1) % every == 0) log::info(command, ": step ", s + 1, "/", steps, " loss ", losses.back());
  }
  model->stages().push_back(tag);

  const Provenance prov = provenance(cfg, pipeline_stage(tag));
  save_predictor(ws.predictor(tag), *model, {{"config_hash", prov.config_hash}, {"corpus_hash", prov.corpus_hash}});
  LpvPredictor stored = load_predictor(ws.predictor(tag));

  auto window_mean = [&](bool head) {
    const std::size_t n = std::min<std::size_t>(50, losses.size());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += head ? losses[i] : losses[losses.size() - 1 - i];
    return n ? s / static_cast<double>(n) : 0.0;
  };
  std::vector<std::string> history;
  for (auto t : stored.stages()) history.push_back(to_string(t));
  nlohmann::json body;
  body["steps"] = steps;
  body["started_from"] = started_from;
  body["stage_history"] = history;
  body["train_loss"] = {{"first_50_mean", window_mean(true)}, {"last_50_mean", window_mean(false)}};
  body["heldout_ce"] = {{"valid_initial", initial_valid},
                        {"test_initial", initial_test},
                        {"valid", heldout_cross_entropy(stored, valid)},
                        {"test", heldout_cross_entropy(stored, test)}};
  body["artifacts"] = digests(ws, {ws.predictor(tag)});
  return write_report(ws, cfg, command, prov.config_hash, body, sw.seconds());
}

// ---------------------------------------------------------------------------
// predict

inline std::vector<LpvSequence> predict_sequences(LpvPredictor& model, const PipelineConfig& cfg,
                                                  const std::vector<WordSequence>& utts) {
  std::vector<LpvSequence> out;
  for (const auto& u : utts)
    out.push_back({u.utt_id, generate(model, u.words, decode_mode(cfg), cfg.predict.temperature,
                                      substream(cfg.seed, "predict/" + u.utt_id))});
  return out;
}

/// Predicts LPVs for a workspace corpus (`input` is a corpus name) or for an
/// arbitrary manifest path.
inline nlohmann::json predict_stage(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt,
                                    const std::string& input = "test", fs::path out = {}) {
  Stopwatch sw;
  LpvPredictor model = open_final_predictor(ws, cfg, opt);
  const bool named = std::find(corpus_names().begin(), corpus_names().end(), input) != corpus_names().end();
  CorpusManifest m;
  if (named) {
    m = open_corpus(ws, cfg, input, opt);
  } else {
    if (!fs::exists(input)) fail<ValidationError>("predict: input ", input, " does not exist");
    m = load_manifest(fs::is_directory(input) ? fs::path(input) / "manifest.jsonl" : fs::path(input));
  }
  if (out.empty()) out = ws.lpv("predicted_" + (named ? input : std::string("custom")) + ".jsonl");
  const auto utts = word_sequences(m);
  const auto seqs = predict_sequences(model, cfg, utts);
  const Provenance prov = provenance(cfg, Stage::predict);
  write_lpv(out, seqs, prov);

  std::vector<int> all;
  for (const auto& s : seqs) all.insert(all.end(), s.indices.begin(), s.indices.end());
  nlohmann::json body;
  body["input"] = named ? input : std::string("custom");
  body["mode"] = cfg.predict.mode;
  body["utterances"] = seqs.size();
  body["usage"] = usage_json(usage_stats(all, cfg.vq.K));
  if (named && input != "text" && fs::exists(ws.lpv(input + ".jsonl"))) {
    const auto ref = open_lpv(ws.lpv(input + ".jsonl"), stage_hash(cfg, Stage::encoder), "extract-lpv", opt);
    std::map<std::string, const LpvSequence*> by_id;
    for (const auto& s : ref) by_id[s.utt_id] = &s;
    long hit = 0, total = 0;
    for (const auto& s : seqs) {
      auto it = by_id.find(s.utt_id);
      if (it == by_id.end()) continue;
      for (std::size_t i = 0; i < s.indices.size(); ++i) hit += s.indices[i] == it->second->indices[i];
      total += static_cast<long>(s.indices.size());
    }
    body["agreement_with_extracted"] = total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
  }
  body["artifacts"] = nlohmann::json::object();
  body["artifacts"][out.filename().string()] = io::file_digest(out);
  return write_report(ws, cfg, "predict", prov.config_hash, body, sw.seconds());
}

// ---------------------------------------------------------------------------
// evaluate

inline nlohmann::json evaluation_json(const EvaluationResult& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [id, d] : r.d_pit_per_utt) per[id] = d;
  return {{"d_pit_mean", r.d_pit_mean}, {"d_pit_per_utt", per}, {"kl_dur", r.kl_dur}, {"s_w", r.s_w}, {"n_utts", r.n_utts}};
}

/// Compares two prosody files directly.
inline nlohmann::json evaluate_files(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt,
                                     const fs::path& system1, const fs::path& system2) {
  Stopwatch sw;
  require_exists(system1, "the producer of --system1");
  require_exists(system2, "the producer of --system2");
  ProsodyFile a = read_prosody(system1), b = read_prosody(system2);
  const auto& ha = a.provenance.corpus_hash;
  const auto& hb = b.provenance.corpus_hash;
  if (ha != hb) {
    if (!opt.force)
      fail<ConfigError>("evaluate: systems derive from different corpora (", ha.empty() ? "<none>" : ha, " vs ",
                        hb.empty() ? "<none>" : hb, "); pass --force to compare anyway");
    log::warn("evaluate: comparing systems from different corpora (forced)");
  }
  nlohmann::json body = evaluation_json(evaluate_systems(a, b, dtw_cost(cfg)));
  body["systems"] = {{"system1", io::file_digest(system1)}, {"system2", io::file_digest(system2)}};
  body["config"] = config_echo(cfg);
  return write_report(ws, cfg, "evaluate", stage_hash(cfg, Stage::evaluate), body, sw.seconds());
}

/// Renders predicted, uniform-random and extracted test LPVs through the
/// renderer fitted on the training set and scores each against the ground
/// truth of the test corpus.
inline nlohmann::json evaluate_stage(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt) {
  Stopwatch sw;
  const CorpusManifest train_m = open_corpus(ws, cfg, "train", opt);
  const CorpusManifest test_m = open_corpus(ws, cfg, "test", opt);
  const auto enc_hash = stage_hash(cfg, Stage::encoder);
  const auto train_lpv = open_lpv(ws.lpv("train.jsonl"), enc_hash, "extract-lpv", opt);
  const auto test_lpv = open_lpv(ws.lpv("test.jsonl"), enc_hash, "extract-lpv", opt);
  const auto predicted = open_lpv(ws.lpv("predicted_test.jsonl"), stage_hash(cfg, Stage::predict), "predict", opt);

  const ProsodyRenderer renderer = fit_renderer(load_with_pitch(ws, train_m, "train"), train_lpv, cfg.vq.K);
  const auto words = word_sequences(test_m);
  const ProsodyFile truth = read_prosody(ws.corpus("test") / "prosody.jsonl");
  const std::uint64_t render_seed = substream(cfg.seed, "render");
  const Provenance prov = provenance(cfg, Stage::evaluate);

  const std::vector<std::pair<std::string, std::vector<LpvSequence>>> systems = {
      {"predicted", predicted},
      {"uniform", uniform_lpv(words, cfg.vq.K, substream(cfg.seed, "uniform"))},
      {"extracted", test_lpv}};
  nlohmann::json body;
  std::vector<fs::path> files;
  for (const auto& [name, lpv] : systems) {
    const ProsodyFile rendered = render_all(renderer, words, lpv, render_seed, 1, prov);
    const fs::path path = ws.lpv("prosody_" + name + ".jsonl");
    write_prosody(path, rendered);
    files.push_back(path);
    body["systems"][name] = evaluation_json(evaluate_systems(rendered, truth, dtw_cost(cfg)));
    log::info("evaluate: ", name, " d_pit ", body["systems"][name]["d_pit_mean"].get<double>(), " kl_dur ",
              body["systems"][name]["kl_dur"].get<double>());
  }
  body["d_pit_mean"] = body["systems"]["predicted"]["d_pit_mean"];
  body["kl_dur"] = body["systems"]["predicted"]["kl_dur"];
  body["s_w"] = body["systems"]["predicted"]["s_w"];
  body["config"] = config_echo(cfg);
  body["artifacts"] = digests(ws, files);
  return write_report(ws, cfg, "evaluate", prov.config_hash, body, sw.seconds());
}

// ---------------------------------------------------------------------------
// run-all

inline nlohmann::json run_all(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt) {
  Stopwatch sw;
  nlohmann::json hashes;
  auto note = [&](const nlohmann::json& r) { hashes[r.at("stage").get<std::string>()] = r.at("report_hash"); };
  note(gen_corpus(ws, cfg));
  note(train_encoder_stage(ws, cfg, opt));
  note(extract_lpv_stage(ws, cfg, opt));
  for (StageTag t : declared_stages(cfg)) note(predictor_stage(ws, cfg, t, opt));
  note(predict_stage(ws, cfg, opt));
  note(evaluate_stage(ws, cfg, opt));
  return write_report(ws, cfg, "run-all", config_hash(cfg), {{"report_hashes", hashes}}, sw.seconds());
}

/// Runs the stages from `first` onwards (0 gen-corpus, 1 train-encoder,
/// 2 extract-lpv, 3 predictor stages, 4 predict, 5 evaluate), stopping after
/// `last`.
inline void run_range(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt, int first, int last) {
  if (first <= 0 && last >= 0) gen_corpus(ws, cfg);
  if (first <= 1 && last >= 1) train_encoder_stage(ws, cfg, opt);
  if (first <= 2 && last >= 2) extract_lpv_stage(ws, cfg, opt);
  if (first <= 3 && last >= 3)
    for (StageTag t : declared_stages(cfg)) predictor_stage(ws, cfg, t, opt);
  if (first <= 4 && last >= 4) predict_stage(ws, cfg, opt);
  if (first <= 5 && last >= 5) evaluate_stage(ws, cfg, opt);
}

// ---------------------------------------------------------------------------
// ablate

struct AblationSpec {
  std::string toggle;
  std::optional<int> value;  // codebook_size only
};

inline const std::vector<std::string>& ablation_toggles() {
  static const std::vector<std::string> t = {"kmeans_init", "text_pt", "audio_pt", "text_audio_pt", "codebook_size"};
  return t;
}

/// The variant config and the first stage it must rerun (earlier artifacts
/// are shared with the baseline).
inline std::pair<PipelineConfig, int> ablation_variant(const PipelineConfig& base, const AblationSpec& a) {
  PipelineConfig v = base;
  auto drop = [&](const std::string& stage) {
    auto& s = v.predictor.stages;
    if (std::find(s.begin(), s.end(), stage) == s.end())
      fail<ConfigError>("ablate ", a.toggle, ": baseline does not declare ", stage);
    s.erase(std::remove(s.begin(), s.end(), stage), s.end());
  };
  int first = 3;
  if (a.toggle == "kmeans_init") {
    if (!base.encoder.kmeans_init) fail<ConfigError>("ablate kmeans_init: baseline already uses random init");
    v.encoder.kmeans_init = false;
    first = 1;
  } else if (a.toggle == "text_pt") {
    drop("text_pretrain");
  } else if (a.toggle == "audio_pt") {
    drop("audio_pretrain");
  } else if (a.toggle == "text_audio_pt") {
    drop("text_pretrain");
    drop("audio_pretrain");
  } else if (a.toggle == "codebook_size") {
    const int k = a.value.value_or(2 * base.vq.K);
    if (k == base.vq.K) fail<ConfigError>("ablate codebook_size: variant K equals baseline K");
    v.vq.K = v.predictor.K = k;
    first = 1;
  } else {
    fail<ConfigError>("unknown ablation toggle \"", a.toggle, "\"");
  }
  if (v.predictor.stages.empty()) fail<ConfigError>("ablate ", a.toggle, ": no predictor stage left");
  validate(v);
  return {v, first};
}

/// Config paths an ablation toggle is allowed to change.
inline std::vector<std::string> toggle_scope(const std::string& toggle) {
  if (toggle == "kmeans_init") return {"/encoder/kmeans_init"};
  if (toggle == "codebook_size") return {"/vq/K", "/predictor/K"};
  return {"/predictor/stages"};
}

/// Paths (JSON pointers) where two configs differ.
inline std::vector<std::string> config_diff(const PipelineConfig& a, const PipelineConfig& b) {
  std::vector<std::string> out;
  for (const auto& op : nlohmann::json::diff(config_echo(a), config_echo(b))) out.push_back(op.at("path").get<std::string>());
  return out;
}

inline nlohmann::json arm_summary(const Workspace& ws, bool through_all) {
  const auto enc = read_report(ws.report("train-encoder"));
  nlohmann::json s = {{"perplexity", enc["usage"]["perplexity"]},
                      {"active_codes", enc["usage"]["active_codes"]},
                      {"bijective_purity", enc["agreement"]["bijective_purity"]},
                      {"majority_purity", enc["agreement"]["majority_purity"]},
                      {"recon", enc["final_losses"]["recon"]}};
  if (through_all) {
    const auto ft = read_report(ws.report("finetune"));
    const auto ev = read_report(ws.report("evaluate"));
    s["heldout_ce_test"] = ft["heldout_ce"]["test"];
    s["heldout_ce_valid"] = ft["heldout_ce"]["valid"];
    s["d_pit"] = ev["d_pit_mean"];
    s["kl_dur"] = ev["kl_dur"];
  }
  return s;
}

inline void copy_tree(const fs::path& from, const fs::path& to) {
  if (!fs::exists(from)) return;
  fs::create_directories(to);
  fs::copy(from, to, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
}

/// Shares artifacts of stages before `first` from the baseline workspace.
inline void share_upstream(const Workspace& base, const Workspace& variant, int first) {
  if (first >= 1) copy_tree(base.root / "corpus", variant.root / "corpus");
  if (first >= 3) {
    fs::create_directories(variant.root / "checkpoints");
    fs::copy_file(base.encoder(), variant.encoder(), fs::copy_options::overwrite_existing);
    fs::copy_file(base.codebook(), variant.codebook(), fs::copy_options::overwrite_existing);
    for (const auto& name : acoustic_corpora()) {
      fs::create_directories(variant.root / "lpv");
      fs::copy_file(base.lpv(name + ".jsonl"), variant.lpv(name + ".jsonl"), fs::copy_options::overwrite_existing);
    }
    for (const char* r : {"gen-corpus", "train-encoder", "extract-lpv"}) {
      fs::create_directories(variant.root / "reports");
      fs::copy_file(base.report(r), variant.report(r), fs::copy_options::overwrite_existing);
    }
  } else if (first >= 1) {
    fs::create_directories(variant.root / "reports");
    fs::copy_file(base.report("gen-corpus"), variant.report("gen-corpus"), fs::copy_options::overwrite_existing);
  }
}

/// Paired baseline/variant runs over `n_seeds` consecutive seeds starting at
/// the config seed. `through_all == false` stops after LPV extraction.
inline nlohmann::json ablate(const Workspace& ws, const PipelineConfig& cfg, const RunOptions& opt,
                             const std::vector<AblationSpec>& toggles, int n_seeds, bool through_all) {
  Stopwatch sw;
  if (toggles.empty()) fail<ConfigError>("ablate: no toggle given");
  if (n_seeds < 1) fail<ConfigError>("ablate: --seeds must be >= 1");
  const int last = through_all ? 5 : 2;
  for (const auto& t : toggles)
    if (through_all == false && (t.toggle == "text_pt" || t.toggle == "audio_pt" || t.toggle == "text_audio_pt"))
      fail<ConfigError>("ablate ", t.toggle, " needs the predictor stages; drop --through encoder");

  std::string tag;
  for (const auto& t : toggles) tag += (tag.empty() ? "" : "+") + t.toggle;
  nlohmann::json body;
  body["toggles"] = nlohmann::json::array();
  for (const auto& t : toggles) body["toggles"].push_back(t.toggle);
  body["seeds"] = nlohmann::json::array();
  body["through"] = through_all ? "all" : "encoder";

  std::map<std::string, std::vector<nlohmann::json>> arms;
  for (int i = 0; i < n_seeds; ++i) {
    PipelineConfig base = cfg;
    base.seed = cfg.seed + static_cast<std::uint64_t>(i);
    derive_seeds(base);
    body["seeds"].push_back(base.seed);
    const Workspace base_ws{ws.root / "ablate" / tag / ("seed_" + std::to_string(base.seed)) / "baseline"};
    log::info("ablate: seed ", base.seed, " baseline");
    run_range(base_ws, base, opt, 0, last);
    arms["baseline"].push_back(arm_summary(base_ws, through_all));
    for (const auto& t : toggles) {
      auto [variant, first] = ablation_variant(base, t);
      const Workspace var_ws{base_ws.root.parent_path() / ("no_" + t.toggle)};
      if (fs::exists(var_ws.root)) fs::remove_all(var_ws.root);
      share_upstream(base_ws, var_ws, first);
      log::info("ablate: seed ", base.seed, " variant ", t.toggle);
      run_range(var_ws, variant, opt, first, last);
      arms[t.toggle].push_back(arm_summary(var_ws, through_all));
      const auto diff = config_diff(base, variant);
      bool single = !diff.empty();
      for (const auto& path : diff) {
        bool inside = false;
        for (const auto& scope : toggle_scope(t.toggle)) inside = inside || path.rfind(scope, 0) == 0;
        single = single && inside;
      }
      if (!single) fail("ablate ", t.toggle, ": variant differs from baseline outside the toggled factor");
      if (i == 0) body["config_diff"][t.toggle] = diff;
    }
  }

  nlohmann::json table;
  for (const auto& [arm, runs] : arms) {
    table[arm]["runs"] = runs;
    for (auto it = runs.front().begin(); it != runs.front().end(); ++it) {
      double s = 0.0;
      for (const auto& r : runs) s += r.at(it.key()).get<double>();
      table[arm]["mean"][it.key()] = s / static_cast<double>(runs.size());
    }
  }
  body["arms"] = table;
  return write_report(ws, cfg, "ablate_" + tag, config_hash(cfg), body, sw.seconds());
}

}  // namespace lpv
