#pragma once

// Data model, on-disk formats and the synthetic prosody corpus.
//
// Feature files ("LPVF", little-endian):
//   magic "LPVF" | u32 version=1 | u32 n_frames | u32 n_bands | f32[n_frames*n_bands] row-major
//
// Manifest (JSONL): an optional first line {"manifest": {...}} carrying
// version/vocab_size/n_bands and provenance hashes, then one utterance record
// per line.

#include "json.hpp"
#include "lpv/binary_io.hpp"
#include "lpv/common.hpp"
#include "lpv/prosody_records.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace lpv {

enum class Quality { high, low, text_only };
enum class Split { train, valid, test };

inline std::string to_string(Quality q) {
  switch (q) {
    case Quality::high: return "high";
    case Quality::low: return "low";
    case Quality::text_only: return "text_only";
  }
  return "?";
}

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

inline Quality parse_quality(const std::string& s) {
  if (s == "high") return Quality::high;
  if (s == "low") return Quality::low;
  if (s == "text_only") return Quality::text_only;
  fail<ValidationError>("unknown quality \"", s, "\"");
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  fail<ValidationError>("unknown split \"", s, "\"");
}

/// Half-open frame interval [start, end) covered by one word.
struct Boundary {
  int start = 0;
  int end = 0;
  int length() const { return end - start; }
  bool operator==(const Boundary&) const = default;
};

struct Utterance {
  std::string id;
  std::vector<int> words;
  std::vector<Boundary> boundaries;
  Mat features;  // F x B; empty for text-only data
  std::vector<double> pitch;
  std::vector<bool> voiced;
  Quality quality = Quality::high;
  Split split = Split::train;

  int n_frames() const { return static_cast<int>(features.rows()); }
  std::vector<int> durations() const {
    std::vector<int> d;
    d.reserve(boundaries.size());
    for (const auto& b : boundaries) d.push_back(b.length());
    return d;
  }
};

/// Checks that boundaries tile [0, n_frames) with non-empty, ordered intervals.
inline void validate_boundaries(const std::vector<Boundary>& bounds, int n_frames, const std::string& where) {
  int cursor = 0;
  for (std::size_t i = 0; i < bounds.size(); ++i) {
    const auto& b = bounds[i];
    if (b.start != cursor)
      fail<ValidationError>(where, ": word ", i, " starts at ", b.start, ", expected ", cursor);
    if (b.end <= b.start) fail<ValidationError>(where, ": word ", i, " has an empty interval");
    if (b.end > n_frames) fail<ValidationError>(where, ": word ", i, " ends beyond frame count ", n_frames);
    cursor = b.end;
  }
  if (cursor != n_frames) fail<ValidationError>(where, ": boundaries cover ", cursor, " of ", n_frames, " frames");
}

inline void validate_utterance(const Utterance& u, int vocab_size) {
  for (int w : u.words)
    if (w < 0 || w >= vocab_size) fail<ValidationError>(u.id, ": word id ", w, " outside [0, ", vocab_size, ")");
  if (u.quality == Quality::text_only) {
    if (u.features.size() != 0 || !u.pitch.empty() || !u.voiced.empty() || !u.boundaries.empty())
      fail<ValidationError>(u.id, ": text-only utterance carries acoustic data");
    return;
  }
  if (u.words.size() != u.boundaries.size())
    fail<ValidationError>(u.id, ": ", u.words.size(), " words but ", u.boundaries.size(), " boundaries");
  validate_boundaries(u.boundaries, u.n_frames(), u.id);
  if (static_cast<int>(u.pitch.size()) != u.n_frames() || static_cast<int>(u.voiced.size()) != u.n_frames())
    fail<ValidationError>(u.id, ": pitch/voiced length differs from frame count");
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Knobs for building a SyntheticSpec. Words fall into classes (class = w mod
/// n_classes); class-level bigrams drive word order and each class prefers one
/// prosody cluster, so co-occurrence statistics carry prosodic information.
struct SynthesisParams {
  int vocab_size = 64;
  int n_clusters = 8;
  int n_classes = 8;
  int n_low_bands = 20;
  int n_bands = 80;
  double noise_sigma = 0.3;
  double mean_scale = 1.0;
  double style_spread = 0.2;
  double class_stickiness = 0.7;
  double dur_base = 3.0;
  double dur_step = 1.0;
  double dur_word_jitter = 1.0;
  double dur_sigma = 0.8;
  double pitch_base_hz = 110.0;
  double pitch_step_hz = 12.0;
  double pitch_slope_hz = 2.0;
  double pitch_noise_hz = 2.0;
  int min_words = 4;
  int max_words = 10;
  double corrupt_fraction = 0.05;
  double corrupt_amplitude = 3.0;
  double filler_sigma = 1.0;
  std::uint64_t seed = 1;
};

struct SyntheticSpec {
  int vocab_size = 0;
  int n_clusters = 0;
  int n_low_bands = 20;
  int n_bands = 80;
  Mat cluster_means;     // K* x n_low_bands
  double noise_sigma = 0.0;
  Mat word_style_table;  // V x K*, row-stochastic
  Mat word_bigram;       // V x V row-stochastic; empty means uniform
  Mat duration_mean;     // V x K*
  Mat duration_sigma;    // V x K*
  std::vector<double> pitch_base;   // K*
  std::vector<double> pitch_slope;  // K*, Hz per frame
  double pitch_noise_hz = 0.0;
  int min_words = 4;
  int max_words = 10;
  double corrupt_fraction = 0.05;
  double corrupt_amplitude = 3.0;
  double filler_sigma = 1.0;
  std::uint64_t seed = 1;
};

inline void validate_spec(const SyntheticSpec& s) {
  auto bad = [](auto&&... args) { fail<ValidationError>("synthetic spec: ", args...); };
  if (s.vocab_size < 1 || s.n_clusters < 1) bad("vocab_size and n_clusters must be positive");
  if (s.n_low_bands < 1 || s.n_low_bands > s.n_bands) bad("need 0 < n_low_bands <= n_bands");
  if (!(s.noise_sigma >= 0.0)) bad("noise_sigma must be >= 0");
  if (s.pitch_noise_hz < 0.0 || s.filler_sigma < 0.0) bad("noise levels must be >= 0");
  if (s.min_words < 1 || s.max_words < s.min_words) bad("invalid word-count range");
  if (s.cluster_means.rows() != s.n_clusters || s.cluster_means.cols() != s.n_low_bands)
    bad("cluster_means must be n_clusters x n_low_bands");
  if (!all_finite(s.cluster_means)) bad("cluster_means not finite");
  auto check_stochastic = [&](const Mat& m, const char* name, Eigen::Index cols) {
    if (m.rows() != s.vocab_size || m.cols() != cols) bad(name, " has wrong shape");
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      if ((m.row(r).array() < 0.0).any()) bad(name, " row ", r, " has negative entries");
      if (std::abs(m.row(r).sum() - 1.0) > 1e-9) bad(name, " row ", r, " does not sum to 1");
    }
  };
  check_stochastic(s.word_style_table, "word_style_table", s.n_clusters);
  if (s.word_bigram.size() != 0) check_stochastic(s.word_bigram, "word_bigram", s.vocab_size);
  if (s.duration_mean.rows() != s.vocab_size || s.duration_mean.cols() != s.n_clusters ||
      s.duration_sigma.rows() != s.vocab_size || s.duration_sigma.cols() != s.n_clusters)
    bad("duration parameter tables have wrong shape");
  if ((s.duration_sigma.array() < 0.0).any()) bad("duration sigma must be >= 0");
  if (static_cast<int>(s.pitch_base.size()) != s.n_clusters || static_cast<int>(s.pitch_slope.size()) != s.n_clusters)
    bad("pitch parameters must have one entry per cluster");
  for (int a = 0; a < s.n_clusters; ++a)
    for (int b = a + 1; b < s.n_clusters; ++b) {
      const double d = (s.cluster_means.row(a) - s.cluster_means.row(b)).norm();
      if (d < 6.0 * s.noise_sigma) bad("cluster means ", a, " and ", b, " closer than 6*noise_sigma (", d, ")");
    }
}

inline int word_class(int word, int n_classes) { return word % n_classes; }

inline SyntheticSpec make_synthetic_spec(const SynthesisParams& p) {
  if (p.n_classes < 1) fail<ValidationError>("synthetic spec: n_classes must be positive");
  SyntheticSpec s;
  s.vocab_size = p.vocab_size;
  s.n_clusters = p.n_clusters;
  s.n_low_bands = p.n_low_bands;
  s.n_bands = p.n_bands;
  s.noise_sigma = p.noise_sigma;
  s.pitch_noise_hz = p.pitch_noise_hz;
  s.min_words = p.min_words;
  s.max_words = p.max_words;
  s.corrupt_fraction = p.corrupt_fraction;
  s.corrupt_amplitude = p.corrupt_amplitude;
  s.filler_sigma = p.filler_sigma;
  s.seed = p.seed;
  if (p.vocab_size < 1 || p.n_clusters < 1 || p.n_low_bands < 1)
    fail<ValidationError>("synthetic spec: sizes must be positive");

  Rng rng(substream(p.seed, "synthetic-spec"));

  // Cluster means are rounded to f32 so that zero-noise features survive the
  // feature-file round trip exactly.
  const double min_sep = std::max(6.0 * p.noise_sigma, 1e-3);
  bool separated = false;
  for (int attempt = 0; attempt < 1000 && !separated; ++attempt) {
    s.cluster_means.resize(p.n_clusters, p.n_low_bands);
    for (Eigen::Index i = 0; i < s.cluster_means.size(); ++i)
      s.cluster_means.data()[i] = static_cast<float>(gaussian(rng, 0.0, p.mean_scale));
    separated = true;
    for (int a = 0; a < p.n_clusters && separated; ++a)
      for (int b = a + 1; b < p.n_clusters; ++b)
        if ((s.cluster_means.row(a) - s.cluster_means.row(b)).norm() < min_sep) {
          separated = false;
          break;
        }
  }
  if (!separated) fail<ValidationError>("synthetic spec: could not draw separated cluster means; raise mean_scale");

  s.word_style_table = Mat::Constant(p.vocab_size, p.n_clusters, p.style_spread / p.n_clusters);
  for (int w = 0; w < p.vocab_size; ++w) s.word_style_table(w, word_class(w, p.n_classes) % p.n_clusters) += 1.0 - p.style_spread;

  std::vector<int> class_size(static_cast<std::size_t>(p.n_classes), 0);
  for (int w = 0; w < p.vocab_size; ++w) ++class_size[static_cast<std::size_t>(word_class(w, p.n_classes))];
  s.word_bigram = Mat::Constant(p.vocab_size, p.vocab_size, (1.0 - p.class_stickiness) / p.vocab_size);
  for (int w = 0; w < p.vocab_size; ++w) {
    const int next_class = (word_class(w, p.n_classes) + 1) % p.n_classes;
    if (class_size[static_cast<std::size_t>(next_class)] == 0) {
      s.word_bigram.row(w).setConstant(1.0 / p.vocab_size);
      continue;
    }
    for (int v = 0; v < p.vocab_size; ++v)
      if (word_class(v, p.n_classes) == next_class)
        s.word_bigram(w, v) += p.class_stickiness / class_size[static_cast<std::size_t>(next_class)];
  }

  s.duration_mean.resize(p.vocab_size, p.n_clusters);
  s.duration_sigma = Mat::Constant(p.vocab_size, p.n_clusters, p.dur_sigma);
  for (int w = 0; w < p.vocab_size; ++w) {
    const double jitter = uniform01(rng) * p.dur_word_jitter;
    for (int c = 0; c < p.n_clusters; ++c) s.duration_mean(w, c) = p.dur_base + p.dur_step * c + jitter;
  }
  for (int c = 0; c < p.n_clusters; ++c) {
    s.pitch_base.push_back(p.pitch_base_hz + p.pitch_step_hz * c);
    s.pitch_slope.push_back(p.pitch_slope_hz * static_cast<double>(c % 3 - 1));
  }
  validate_spec(s);
  return s;
}

/// Generated utterances plus the hidden per-word cluster labels (the sidecar).
struct GeneratedCorpus {
  std::vector<Utterance> utterances;
  std::vector<std::vector<int>> clusters;  // one label per word; empty for text-only
};

/// Voicing pattern of one word: onset frame unvoiced, and the final frame too
/// when the word is at least 3 frames long. Every word keeps a voiced frame.
inline bool frame_voiced(int frame_in_word, int duration) {
  if (frame_in_word == 0) return false;
  if (duration >= 3 && frame_in_word == duration - 1) return false;
  return true;
}

inline std::vector<int> sample_word_sequence(const SyntheticSpec& spec, Rng& rng) {
  const int span = spec.max_words - spec.min_words + 1;
  const int n = spec.min_words + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(span)));
  std::vector<int> words;
  words.reserve(static_cast<std::size_t>(n));
  std::vector<double> row(static_cast<std::size_t>(spec.vocab_size));
  for (int i = 0; i < n; ++i) {
    if (i == 0 || spec.word_bigram.size() == 0) {
      words.push_back(static_cast<int>(uniform_index(rng, static_cast<std::size_t>(spec.vocab_size))));
    } else {
      for (int v = 0; v < spec.vocab_size; ++v) row[static_cast<std::size_t>(v)] = spec.word_bigram(words.back(), v);
      words.push_back(static_cast<int>(sample_categorical(rng, row)));
    }
  }
  return words;
}

/// Samples n_utts utterances. Pure function of (spec, n_utts, quality, seed).
inline GeneratedCorpus generate_corpus(const SyntheticSpec& spec, int n_utts, Quality quality, std::uint64_t seed,
                                       const std::string& id_prefix = "utt") {
  validate_spec(spec);
  if (n_utts < 1) fail<ValidationError>("generate_corpus: n_utts must be >= 1");
  Rng rng(substream(seed, "corpus/" + to_string(quality)));
  const double sigma = quality == Quality::low ? 2.0 * spec.noise_sigma : spec.noise_sigma;

  GeneratedCorpus out;
  out.utterances.reserve(static_cast<std::size_t>(n_utts));
  std::vector<double> style(static_cast<std::size_t>(spec.n_clusters));
  for (int u = 0; u < n_utts; ++u) {
    Utterance utt;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06d", u);
    utt.id = id_prefix + "_" + buf;
    utt.quality = quality;
    utt.words = sample_word_sequence(spec, rng);
    std::vector<int> labels;
    if (quality == Quality::text_only) {
      out.utterances.push_back(std::move(utt));
      out.clusters.emplace_back();
      continue;
    }
    std::vector<int> durations;
    for (int w : utt.words) {
      for (int c = 0; c < spec.n_clusters; ++c) style[static_cast<std::size_t>(c)] = spec.word_style_table(w, c);
      const int c = static_cast<int>(sample_categorical(rng, style));
      labels.push_back(c);
      const double d = std::round(gaussian(rng, spec.duration_mean(w, c), spec.duration_sigma(w, c)));
      durations.push_back(std::max(2, static_cast<int>(d)));
    }
    int n_frames = 0;
    for (int d : durations) {
      utt.boundaries.push_back({n_frames, n_frames + d});
      n_frames += d;
    }
    utt.features.resize(n_frames, spec.n_bands);
    utt.pitch.resize(static_cast<std::size_t>(n_frames));
    utt.voiced.resize(static_cast<std::size_t>(n_frames));
    for (std::size_t i = 0; i < utt.words.size(); ++i) {
      const int c = labels[i];
      const auto& b = utt.boundaries[i];
      for (int f = b.start; f < b.end; ++f) {
        for (int k = 0; k < spec.n_low_bands; ++k) utt.features(f, k) = gaussian(rng, spec.cluster_means(c, k), sigma);
        for (int k = spec.n_low_bands; k < spec.n_bands; ++k) utt.features(f, k) = gaussian(rng, 0.0, spec.filler_sigma);
        const int j = f - b.start;
        utt.pitch[static_cast<std::size_t>(f)] =
            gaussian(rng, spec.pitch_base[static_cast<std::size_t>(c)] + spec.pitch_slope[static_cast<std::size_t>(c)] * j,
                     spec.pitch_noise_hz);
        utt.voiced[static_cast<std::size_t>(f)] = frame_voiced(j, b.length());
      }
    }
    if (quality == Quality::low) {
      for (int f = 0; f < n_frames; ++f) {
        if (uniform01(rng) >= spec.corrupt_fraction) continue;
        for (int k = 0; k < spec.n_low_bands; ++k)
          utt.features(f, k) = (2.0 * uniform01(rng) - 1.0) * spec.corrupt_amplitude;
      }
    }
    // Keep in-memory features identical to what the f32 feature file stores.
    utt.features = utt.features.cast<float>().cast<double>();
    out.utterances.push_back(std::move(utt));
    out.clusters.push_back(std::move(labels));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature files

inline constexpr char kFeatureMagic[4] = {'L', 'P', 'V', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::string encode_features(const Mat& m) {
  if (!all_finite(m)) fail<ValidationError>("write_features: matrix has non-finite entries");
  std::string out(kFeatureMagic, 4);
  io::put_u32(out, kFeatureVersion);
  io::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  io::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  out.reserve(out.size() + static_cast<std::size_t>(m.size()) * 4);
  for (Eigen::Index i = 0; i < m.size(); ++i) io::put_f32(out, static_cast<float>(m.data()[i]));
  return out;
}

inline void write_features(const Mat& m, const std::filesystem::path& path) { io::write_file(path, encode_features(m)); }

struct FeatureHeader {
  std::uint32_t n_frames = 0;
  std::uint32_t n_bands = 0;
};

inline FeatureHeader read_feature_header(io::Reader& r) {
  const std::string magic = r.bytes(4, "magic");
  if (magic != std::string(kFeatureMagic, 4)) fail<FormatError>(r.source(), ": bad magic at offset 0");
  const std::uint32_t version = r.u32("version");
  if (version != kFeatureVersion) fail<FormatError>(r.source(), ": unsupported version ", version, " at offset 4");
  FeatureHeader h;
  h.n_frames = r.u32("n_frames");
  h.n_bands = r.u32("n_bands");
  return h;
}

inline Mat decode_features(std::string bytes, const std::string& source) {
  io::Reader r(std::move(bytes), source);
  const FeatureHeader h = read_feature_header(r);
  Mat m(h.n_frames, h.n_bands);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32("payload");
  if (r.remaining() != 0) fail<FormatError>(source, ": trailing bytes at offset ", r.offset());
  return m;
}

inline Mat read_features(const std::filesystem::path& path) {
  return decode_features(io::read_file(path), path.string());
}

inline FeatureHeader peek_feature_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path.string(), ": cannot open for reading");
  std::string head(16, '\0');
  in.read(head.data(), 16);
  head.resize(static_cast<std::size_t>(in.gcount()));
  io::Reader r(std::move(head), path.string());
  return read_feature_header(r);
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string id;
  std::optional<std::string> feature_file;  // relative to the manifest directory
  int n_frames = 0;
  int n_words = 0;
  Quality quality = Quality::high;
  Split split = Split::train;
  std::vector<int> words;
  std::vector<Boundary> boundaries;
};

struct CorpusManifest {
  int version = 1;
  int vocab_size = 0;
  int n_bands = 0;
  Provenance provenance;
  std::vector<ManifestEntry> utterances;
  std::filesystem::path root;  // directory holding the manifest
};

inline void write_manifest(const std::filesystem::path& path, const CorpusManifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(path.string(), ": cannot open for writing");
  nlohmann::json header = {{"version", m.version}, {"vocab_size", m.vocab_size}, {"n_bands", m.n_bands}};
  if (!m.provenance.config_hash.empty()) header["config_hash"] = m.provenance.config_hash;
  if (!m.provenance.corpus_hash.empty()) header["corpus_hash"] = m.provenance.corpus_hash;
  out << nlohmann::json{{"manifest", header}}.dump() << '\n';
  for (const auto& e : m.utterances) {
    nlohmann::json j;
    j["id"] = e.id;
    j["feature_file"] = e.feature_file ? nlohmann::json(*e.feature_file) : nlohmann::json(nullptr);
    j["n_frames"] = e.n_frames;
    j["n_words"] = e.n_words;
    j["quality"] = to_string(e.quality);
    j["split"] = to_string(e.split);
    j["words"] = e.words;
    nlohmann::json bounds = nlohmann::json::array();
    for (const auto& b : e.boundaries) bounds.push_back({b.start, b.end});
    j["boundaries"] = bounds;
    out << j.dump() << '\n';
  }
}

inline CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail<FormatError>(path.string(), ": cannot open manifest");
  CorpusManifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  bool bands_known = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail<FormatError>(where, ": invalid JSON: ", e.what());
    }
    try {
      if (j.contains("manifest")) {
        const auto& h = j.at("manifest");
        m.version = h.value("version", 1);
        m.vocab_size = h.value("vocab_size", 0);
        m.n_bands = h.value("n_bands", 0);
        bands_known = m.n_bands > 0;
        m.provenance = {h.value("config_hash", std::string{}), h.value("corpus_hash", std::string{})};
        continue;
      }
      for (const char* key : {"id", "feature_file", "n_frames", "n_words", "quality", "split", "words"})
        if (!j.contains(key)) fail<FormatError>(where, ": missing key \"", key, "\"");
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      if (!j.at("feature_file").is_null()) e.feature_file = j.at("feature_file").get<std::string>();
      e.n_frames = j.at("n_frames").get<int>();
      e.n_words = j.at("n_words").get<int>();
      e.quality = parse_quality(j.at("quality").get<std::string>());
      e.split = parse_split(j.at("split").get<std::string>());
      e.words = j.at("words").get<std::vector<int>>();
      if (static_cast<int>(e.words.size()) != e.n_words)
        fail<FormatError>(where, ": n_words=", e.n_words, " but ", e.words.size(), " word ids");
      for (int w : e.words)
        if (w < 0 || (m.vocab_size > 0 && w >= m.vocab_size)) fail<FormatError>(where, ": word id ", w, " out of range");
      if (e.quality != Quality::text_only) {
        if (!e.feature_file) fail<FormatError>(where, ": acoustic utterance without feature_file");
        if (!j.contains("boundaries")) fail<FormatError>(where, ": missing key \"boundaries\"");
        for (const auto& b : j.at("boundaries")) e.boundaries.push_back({b.at(0).get<int>(), b.at(1).get<int>()});
        if (static_cast<int>(e.boundaries.size()) != e.n_words)
          fail<FormatError>(where, ": boundary count differs from n_words");
        validate_boundaries(e.boundaries, e.n_frames, where);
        const auto file = m.root / *e.feature_file;
        if (!std::filesystem::exists(file)) fail<FormatError>(where, ": feature file ", file.string(), " does not exist");
        const FeatureHeader h = peek_feature_header(file);
        if (static_cast<int>(h.n_frames) != e.n_frames)
          fail<FormatError>(where, ": feature file has ", h.n_frames, " frames, manifest says ", e.n_frames);
        if (!bands_known) {
          m.n_bands = static_cast<int>(h.n_bands);
          bands_known = true;
        } else if (static_cast<int>(h.n_bands) != m.n_bands) {
          fail<FormatError>(where, ": feature file has ", h.n_bands, " bands, expected ", m.n_bands);
        }
      }
      m.utterances.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      fail<FormatError>(where, ": ", e.what());
    } catch (const ValidationError& e) {
      fail<FormatError>(where, ": ", e.what());
    }
  }
  return m;
}

/// Reads every utterance of a manifest, including its features.
inline std::vector<Utterance> load_utterances(const CorpusManifest& m) {
  std::vector<Utterance> out;
  out.reserve(m.utterances.size());
  for (const auto& e : m.utterances) {
    Utterance u;
    u.id = e.id;
    u.words = e.words;
    u.boundaries = e.boundaries;
    u.quality = e.quality;
    u.split = e.split;
    if (e.feature_file) {
      u.features = read_features(m.root / *e.feature_file);
      if (u.n_frames() != e.n_frames) fail<FormatError>(e.id, ": feature/manifest frame mismatch");
    }
    out.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sidecar labels: {"utt_id", "word_index", "cluster"} per line.

struct ClusterLabel {
  std::string utt_id;
  int word_index = 0;
  int cluster = 0;
};

inline void write_labels(const std::filesystem::path& path, const GeneratedCorpus& corpus) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(path.string(), ": cannot open for writing");
  for (std::size_t u = 0; u < corpus.utterances.size(); ++u)
    for (std::size_t i = 0; i < corpus.clusters[u].size(); ++i)
      out << nlohmann::json{{"utt_id", corpus.utterances[u].id}, {"word_index", i}, {"cluster", corpus.clusters[u][i]}}.dump()
          << '\n';
}

inline std::vector<ClusterLabel> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(path.string(), ": cannot open for reading");
  std::vector<ClusterLabel> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("utt_id").get<std::string>(), j.at("word_index").get<int>(), j.at("cluster").get<int>()});
    } catch (const nlohmann::json::exception& e) {
      fail<FormatError>(path.string(), ":", lineno, ": ", e.what());
    }
  }
  return out;
}

/// Ground-truth prosody (pitch + word durations) in the evaluator's format.
inline ProsodyFile truth_prosody(const std::vector<Utterance>& utts, int system_id, Provenance provenance = {}) {
  ProsodyFile f;
  f.provenance = std::move(provenance);
  for (const auto& u : utts) {
    if (u.quality == Quality::text_only) continue;
    f.pitch.push_back({u.id, u.pitch, u.voiced});
    for (std::size_t i = 0; i < u.words.size(); ++i)
      f.durations.push_back({u.id, u.words[i], u.boundaries[i].length(), system_id});
  }
  return f;
}

/// Writes a generated corpus as manifest.jsonl, features/, labels.jsonl and
/// prosody.jsonl under `dir`.
inline CorpusManifest write_corpus(const std::filesystem::path& dir, const GeneratedCorpus& corpus, int vocab_size,
                                   int n_bands, const Provenance& provenance = {}) {
  std::filesystem::create_directories(dir);
  CorpusManifest m;
  m.vocab_size = vocab_size;
  m.n_bands = n_bands;
  m.provenance = provenance;
  m.root = dir;
  for (const auto& u : corpus.utterances) {
    ManifestEntry e;
    e.id = u.id;
    e.n_frames = u.n_frames();
    e.n_words = static_cast<int>(u.words.size());
    e.quality = u.quality;
    e.split = u.split;
    e.words = u.words;
    e.boundaries = u.boundaries;
    if (u.quality != Quality::text_only) {
      e.feature_file = "features/" + u.id + ".lpvf";
      write_features(u.features, dir / *e.feature_file);
    }
    m.utterances.push_back(std::move(e));
  }
  write_manifest(dir / "manifest.jsonl", m);
  write_labels(dir / "labels.jsonl", corpus);
  write_prosody(dir / "prosody.jsonl", truth_prosody(corpus.utterances, 2, provenance));
  return m;
}

}  // namespace lpv
