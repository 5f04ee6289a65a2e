#pragma once

// Word-level prosody encoder: low-band frames -> frame conv stack -> word
// pooling -> word conv stack -> projection -> EMA VQ bottleneck, trained by
// reconstructing the low band through a broadcast-and-linear decoder. The VQ
// layer is bypassed for the first warmup_steps; at that step the codebook is
// seeded from k-means over buffered encoder outputs.

#include "json.hpp"
#include "lpv/autograd.hpp"
#include "lpv/checkpoint.hpp"
#include "lpv/corpus.hpp"
#include "lpv/vq.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

namespace lpv {

struct EncoderConfig {
  int n_low_bands = 20;
  int hidden = 32;
  int frame_layers = 2;
  int word_layers = 2;
  int kernel = 5;
  int code_dim = 16;
  int warmup_steps = 2000;
  int total_steps = 3000;
  int batch_size = 4;
  double commitment_beta = 0.25;
  double lr = 1e-3;
  int buffer_factor = 10;  // reservoir capacity = buffer_factor * K
  int buffer_window = 0;   // trailing warm-up steps that feed the buffer; 0 -> warmup_steps / 10
  bool kmeans_init = true;
  int kmeans_iters = 100;
  int kmeans_restarts = 4;
  double random_init_scale = 1.0;
  bool reseed_dead = false;
  std::uint64_t seed = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderConfig, n_low_bands, hidden, frame_layers, word_layers, kernel,
                                                code_dim, warmup_steps, total_steps, batch_size, commitment_beta, lr,
                                                buffer_factor, buffer_window, kmeans_init, kmeans_iters, kmeans_restarts,
                                                random_init_scale, reseed_dead, seed)

inline void validate(const EncoderConfig& c) {
  auto bad = [](auto&&... a) { fail<ConfigError>("encoder config: ", a...); };
  if (c.n_low_bands < 1) bad("n_low_bands must be positive");
  if (c.hidden < 1 || c.code_dim < 1) bad("hidden and code_dim must be positive");
  if (c.frame_layers < 1 || c.word_layers < 0) bad("need frame_layers >= 1 and word_layers >= 0");
  if (c.kernel < 1 || c.kernel % 2 == 0) bad("kernel must be odd");
  if (c.warmup_steps < 0 || c.warmup_steps >= c.total_steps) bad("need 0 <= warmup_steps < total_steps");
  if (c.kmeans_init && c.warmup_steps < 1) bad("k-means initialisation needs warmup_steps >= 1");
  if (c.batch_size < 1) bad("batch_size must be positive");
  if (c.kmeans_iters < 1 || c.kmeans_restarts < 1) bad("kmeans_iters and kmeans_restarts must be positive");
  if (!(c.lr > 0.0) || c.commitment_beta < 0.0) bad("lr must be positive and commitment_beta >= 0");
}

enum class Phase { warmup, quantized };

inline const char* to_string(Phase p) { return p == Phase::warmup ? "warmup" : "quantized"; }

/// Columns [0, n_low_bands) of a frame matrix.
inline Mat extract_low_band(const Mat& features, int n_low_bands) {
  if (n_low_bands < 1 || features.cols() < n_low_bands)
    fail<ValidationError>("extract_low_band: have ", features.cols(), " bands, need ", n_low_bands);
  return features.leftCols(n_low_bands);
}

/// Mean of the frame rows inside each word's interval.
inline Mat word_pool(const Mat& hidden, std::span<const Boundary> boundaries) {
  Mat out(static_cast<Eigen::Index>(boundaries.size()), hidden.cols());
  for (std::size_t w = 0; w < boundaries.size(); ++w) {
    const auto& b = boundaries[w];
    if (b.end <= b.start) fail<ValidationError>("word_pool: word ", w, " has an empty interval");
    if (b.start < 0 || b.end > hidden.rows())
      fail<ValidationError>("word_pool: word ", w, " interval exceeds ", hidden.rows(), " frames");
    out.row(static_cast<Eigen::Index>(w)) = hidden.middleRows(b.start, b.length()).colwise().mean();
  }
  return out;
}

/// Encoder input for one utterance: low band plus word intervals.
struct EncoderInput {
  std::string id;
  Mat low_band;  // F x n_low_bands
  std::vector<std::pair<int, int>> segments;
};

inline EncoderInput make_encoder_input(const Utterance& u, int n_low_bands) {
  if (u.quality == Quality::text_only) fail<ValidationError>(u.id, ": text-only utterance has no features");
  validate_boundaries(u.boundaries, u.n_frames(), u.id);
  EncoderInput in;
  in.id = u.id;
  in.low_band = extract_low_band(u.features, n_low_bands);
  for (const auto& b : u.boundaries) in.segments.emplace_back(b.start, b.end);
  return in;
}

/// Freezes the quantiser's choice so the straight-through surrogate becomes a
/// smooth function of the parameters (used by gradient checks).
struct QuantOverride {
  std::vector<int> indices;
  Mat codes;   // e[idx], the commitment target
  Mat offset;  // e[idx] - z at the reference point
};

struct EncoderForward {
  ag::Var z;          // W x D pre-quantisation word vectors
  ag::Var bottleneck; // z in warm-up; straight-through quantised z otherwise
  ag::Var recon;      // F x n_low_bands
  ag::Var recon_loss;
  std::optional<ag::Var> commit_loss;
  ag::Var total;
  std::vector<int> indices;  // empty in warm-up
  Mat offset;                // e[idx] - z, quantised phase only
};

class ProsodyAutoencoder {
 public:
  explicit ProsodyAutoencoder(const EncoderConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    Rng rng(substream(cfg.seed, "encoder-init"));
    const int h = cfg.hidden;
    auto conv = [&](const std::string& name, int in) {
      params_.add(name + ".w", ag::random_normal(static_cast<Eigen::Index>(cfg.kernel) * in, h,
                                                 std::sqrt(2.0 / (cfg.kernel * in)), rng));
      params_.add(name + ".b", Mat::Zero(1, h));
      params_.add(name + ".ln_g", Mat::Ones(1, h));
      params_.add(name + ".ln_b", Mat::Zero(1, h));
    };
    for (int i = 0; i < cfg.frame_layers; ++i) conv("frame." + std::to_string(i), i == 0 ? cfg.n_low_bands : h);
    for (int i = 0; i < cfg.word_layers; ++i) conv("word." + std::to_string(i), h);
    params_.add("proj.w", ag::random_normal(h, cfg.code_dim, std::sqrt(1.0 / h), rng));
    params_.add("proj.b", Mat::Zero(1, cfg.code_dim));
    params_.add("dec.w", ag::random_normal(cfg.code_dim, cfg.n_low_bands, std::sqrt(1.0 / cfg.code_dim), rng));
    params_.add("dec.b", Mat::Zero(1, cfg.n_low_bands));
  }

  const EncoderConfig& config() const { return cfg_; }
  ag::ParameterStore& params() { return params_; }
  const ag::ParameterStore& params() const { return params_; }

  /// Encoder path only: word vectors z (W x code_dim).
  ag::Var encode(ag::Tape& t, const EncoderInput& in) {
    ag::Var h = t.constant(in.low_band);
    for (int i = 0; i < cfg_.frame_layers; ++i) h = conv_block(t, h, "frame." + std::to_string(i), i > 0);
    h = t.segment_mean(h, in.segments);
    for (int i = 0; i < cfg_.word_layers; ++i) h = conv_block(t, h, "word." + std::to_string(i), true);
    return t.linear(h, t.param(params_.get("proj.w")), t.param(params_.get("proj.b")));
  }

  EncoderForward forward(ag::Tape& t, const EncoderInput& in, const Codebook* cb, Phase phase,
                         const QuantOverride* frozen = nullptr) {
    EncoderForward out;
    out.z = encode(t, in);
    out.bottleneck = out.z;
    std::optional<ag::Var> codes;
    if (phase == Phase::quantized) {
      const Mat& zv = t.value(out.z);
      Mat e_rows;
      if (frozen) {
        out.indices = frozen->indices;
        out.offset = frozen->offset;
        e_rows = frozen->codes;
      } else {
        if (cb == nullptr || !cb->initialized) fail<ValidationError>("forward: quantised phase needs an initialised codebook");
        QuantizeResult q = quantize(*cb, zv);
        out.indices = std::move(q.indices);
        e_rows = std::move(q.quantized);
        out.offset = e_rows - zv;
      }
      // Straight-through: value e[idx], gradient of identity w.r.t. z.
      out.bottleneck = t.add(out.z, t.constant(out.offset));
      codes = t.constant(std::move(e_rows));
    }
    ag::Var frames = t.broadcast_segments(out.bottleneck, in.segments, static_cast<int>(in.low_band.rows()));
    out.recon = t.linear(frames, t.param(params_.get("dec.w")), t.param(params_.get("dec.b")));
    out.recon_loss = t.mse(out.recon, t.constant(in.low_band));
    out.total = out.recon_loss;
    if (codes) {
      out.commit_loss = t.scale(t.mse(out.z, *codes), cfg_.commitment_beta);
      out.total = t.add(out.total, *out.commit_loss);
    }
    return out;
  }

 private:
  ag::Var conv_block(ag::Tape& t, ag::Var x, const std::string& name, bool residual) {
    ag::Var y = t.linear(t.im2col(x, cfg_.kernel), t.param(params_.get(name + ".w")), t.param(params_.get(name + ".b")));
    y = t.relu(y);
    if (residual) y = t.add(x, y);
    return t.layer_norm(y, t.param(params_.get(name + ".ln_g")), t.param(params_.get(name + ".ln_b")));
  }

  EncoderConfig cfg_;
  ag::ParameterStore params_;
};

// ---------------------------------------------------------------------------
// Training

/// Uniform reservoir sample of word vectors.
class Reservoir {
 public:
  Reservoir(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(substream(seed, "reservoir")) {}

  void offer(const Eigen::Ref<const RowVec>& v) {
    ++seen_;
    if (items_.size() < capacity_) {
      items_.emplace_back(v);
      return;
    }
    const std::size_t j = uniform_index(rng_, static_cast<std::size_t>(seen_));
    if (j < capacity_) items_[j] = v;
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  long long seen() const { return seen_; }

  Mat matrix() const {
    if (items_.empty()) return Mat(0, 0);
    Mat m(static_cast<Eigen::Index>(items_.size()), items_.front().cols());
    for (std::size_t i = 0; i < items_.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = items_[i];
    return m;
  }

 private:
  std::size_t capacity_;
  Rng rng_;
  std::vector<RowVec> items_;
  long long seen_ = 0;
};

struct TrainState {
  int step = 0;
  Phase phase = Phase::warmup;
  ag::Adam adam;
  Reservoir buffer;
  Rng batch_rng;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;

  TrainState(ProsodyAutoencoder& model, const Codebook& cb)
      : adam(model.params().all(), model.config().lr),
        buffer(static_cast<std::size_t>(model.config().buffer_factor) * static_cast<std::size_t>(cb.K),
               model.config().seed),
        batch_rng(substream(model.config().seed, "encoder-batches")) {}
};

struct StepStats {
  int step = 0;
  Phase phase = Phase::warmup;
  double total = 0.0;
  double recon = 0.0;
  double commit = 0.0;
};

inline int buffer_window(const EncoderConfig& c) {
  return c.buffer_window > 0 ? std::min(c.buffer_window, c.warmup_steps) : std::max(1, c.warmup_steps / 10);
}

/// Mean loss over a batch, with gradients accumulated into the parameters.
inline StepStats batch_loss_and_grad(ProsodyAutoencoder& model, std::span<const EncoderInput* const> batch,
                                     const Codebook* cb, Phase phase, std::vector<Mat>* z_out = nullptr,
                                     std::vector<std::vector<int>>* idx_out = nullptr,
                                     const std::vector<QuantOverride>* frozen = nullptr) {
  StepStats s;
  s.phase = phase;
  model.params().zero_grad();
  const double w = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ag::Tape t;
    auto fwd = model.forward(t, *batch[i], cb, phase, frozen ? &(*frozen)[i] : nullptr);
    ag::Var loss = t.scale(fwd.total, w);
    s.total += t.scalar(loss);
    s.recon += w * t.scalar(fwd.recon_loss);
    if (fwd.commit_loss) s.commit += w * t.scalar(*fwd.commit_loss);
    t.backward(loss);
    if (z_out) z_out->push_back(t.value(fwd.z));
    if (idx_out) idx_out->push_back(std::move(fwd.indices));
  }
  return s;
}

/// Quantiser decisions at the current parameters, one override per batch item.
inline std::vector<QuantOverride> freeze_quantization(ProsodyAutoencoder& model,
                                                      std::span<const EncoderInput* const> batch, const Codebook& cb) {
  std::vector<QuantOverride> out;
  for (const auto* in : batch) {
    ag::Tape t;
    const Mat z = t.value(model.encode(t, *in));
    QuantizeResult q = quantize(cb, z);
    out.push_back({q.indices, q.quantized, q.quantized - z});
  }
  return out;
}

/// One optimisation step at state.step. At step == warmup_steps the codebook
/// is initialised (k-means over the buffer, or random for the ablation) and
/// the VQ bottleneck switches on.
inline StepStats train_step(ProsodyAutoencoder& model, std::span<const EncoderInput* const> batch, Codebook& cb,
                            TrainState& state, int batch_id = 0) {
  const EncoderConfig& cfg = model.config();
  if (state.step >= cfg.total_steps) fail<ValidationError>("train_step: already at total_steps");
  if (state.step == cfg.warmup_steps && !cb.initialized) {
    if (cfg.kmeans_init) {
      const Mat points = state.buffer.matrix();
      init_from_kmeans(cb, points, cfg.kmeans_iters, substream(cfg.seed, "kmeans-init"), cfg.kmeans_restarts);
    } else {
      init_random(cb, cfg.seed, cfg.random_init_scale);
    }
  }
  state.phase = state.step < cfg.warmup_steps ? Phase::warmup : Phase::quantized;

  std::vector<Mat> zs;
  std::vector<std::vector<int>> idx;
  StepStats s = batch_loss_and_grad(model, batch, state.phase == Phase::quantized ? &cb : nullptr, state.phase, &zs, &idx);
  s.step = state.step;
  if (!std::isfinite(s.total))
    fail<NumericalError>("encoder loss is not finite at step ", state.step, " (batch ", batch_id, ")");
  state.adam.step();

  if (state.phase == Phase::warmup) {
    if (state.step >= cfg.warmup_steps - buffer_window(cfg))
      for (const auto& z : zs)
        for (Eigen::Index r = 0; r < z.rows(); ++r) state.buffer.offer(z.row(r));
  } else {
    Eigen::Index n = 0;
    for (const auto& z : zs) n += z.rows();
    Mat all(n, cb.D);
    std::vector<int> all_idx;
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < zs.size(); ++i) {
      all.middleRows(r, zs[i].rows()) = zs[i];
      r += zs[i].rows();
      all_idx.insert(all_idx.end(), idx[i].begin(), idx[i].end());
    }
    ema_update(cb, all, all_idx);
    if (cfg.reseed_dead) {
      Rng rng(substream(cfg.seed ^ static_cast<std::uint64_t>(state.step), "reseed"));
      for (int k = 0; k < cb.K; ++k)
        if (cb.ema_count[static_cast<std::size_t>(k)] < 1e-3) {
          const auto pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(all.rows())));
          cb.embeddings.row(k) = all.row(pick);
          cb.ema_sum.row(k) = all.row(pick);
          cb.ema_count[static_cast<std::size_t>(k)] = 1.0;
        }
    }
  }
  ++state.step;
  return s;
}

/// Deterministic epoch-shuffled batches over `data`.
inline std::vector<const EncoderInput*> next_batch(TrainState& state, const std::vector<EncoderInput>& data,
                                                   int batch_size) {
  std::vector<const EncoderInput*> batch;
  for (int i = 0; i < batch_size; ++i) {
    if (state.cursor >= state.order.size()) {
      state.order.resize(data.size());
      std::iota(state.order.begin(), state.order.end(), std::size_t{0});
      for (std::size_t j = state.order.size(); j > 1; --j)
        std::swap(state.order[j - 1], state.order[uniform_index(state.batch_rng, j)]);
      state.cursor = 0;
    }
    batch.push_back(&data[state.order[state.cursor++]]);
  }
  return batch;
}

/// Runs the full schedule; `on_step` (optional) sees every step's stats.
inline std::vector<StepStats> train_encoder(ProsodyAutoencoder& model, Codebook& cb, const std::vector<EncoderInput>& data,
                                            const std::function<void(const StepStats&)>& on_step = {}) {
  if (data.empty()) fail<ValidationError>("train_encoder: empty training set");
  if (cb.D != model.config().code_dim) fail<ValidationError>("train_encoder: codebook D != code_dim");
  TrainState state(model, cb);
  std::vector<StepStats> history;
  history.reserve(static_cast<std::size_t>(model.config().total_steps));
  while (state.step < model.config().total_steps) {
    const int batch_id = state.step;
    auto batch = next_batch(state, data, model.config().batch_size);
    history.push_back(train_step(model, batch, cb, state, batch_id));
    if (on_step) on_step(history.back());
  }
  return history;
}

// ---------------------------------------------------------------------------
// LPV extraction

struct LpvSequence {
  std::string utt_id;
  std::vector<int> indices;
};

inline std::vector<int> encode_indices(ProsodyAutoencoder& model, const Codebook& cb, const EncoderInput& in) {
  ag::Tape t;
  const ag::Var z = model.encode(t, in);
  return quantize(cb, t.value(z)).indices;
}

inline std::vector<LpvSequence> extract_lpv(ProsodyAutoencoder& model, const Codebook& cb,
                                            const std::vector<Utterance>& corpus, UsageStats* usage = nullptr) {
  if (!cb.initialized) fail<ValidationError>("extract_lpv: codebook not initialised");
  std::vector<LpvSequence> out;
  std::vector<int> all;
  for (const auto& u : corpus) {
    if (u.quality == Quality::text_only) continue;
    if (!u.boundaries.empty() && u.boundaries.back().end != u.n_frames())
      fail<FormatError>(u.id, ": word boundaries do not match the feature file");
    LpvSequence s{u.id, encode_indices(model, cb, make_encoder_input(u, model.config().n_low_bands))};
    all.insert(all.end(), s.indices.begin(), s.indices.end());
    out.push_back(std::move(s));
  }
  if (usage) *usage = usage_stats(all, cb.K);
  return out;
}

inline void write_lpv(const std::filesystem::path& path, const std::vector<LpvSequence>& seqs, const Provenance& prov = {}) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(path.string(), ": cannot open for writing");
  for (const auto& s : seqs) {
    nlohmann::json j{{"utt_id", s.utt_id}, {"indices", s.indices}};
    if (!prov.config_hash.empty()) j["config_hash"] = prov.config_hash;
    if (!prov.corpus_hash.empty()) j["corpus_hash"] = prov.corpus_hash;
    out << j.dump() << '\n';
  }
}

inline std::vector<LpvSequence> read_lpv(const std::filesystem::path& path, Provenance* prov = nullptr) {
  std::ifstream in(path);
  if (!in) fail(path.string(), ": cannot open for reading");
  std::vector<LpvSequence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("utt_id").get<std::string>(), j.at("indices").get<std::vector<int>>()});
      if (prov) *prov = {j.value("config_hash", std::string{}), j.value("corpus_hash", std::string{})};
    } catch (const nlohmann::json::exception& e) {
      fail<FormatError>(path.string(), ":", lineno, ": ", e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint

inline void save_encoder(const std::filesystem::path& path, const ProsodyAutoencoder& model, nlohmann::json meta = {}) {
  if (meta.is_null()) meta = nlohmann::json::object();
  meta["kind"] = "prosody_encoder";
  meta["config"] = model.config();
  save_checkpoint(path, std::move(meta), model.params());
}

inline ProsodyAutoencoder load_encoder(const std::filesystem::path& path, nlohmann::json* header = nullptr) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.header.value("kind", std::string{}) != "prosody_encoder")
    fail<FormatError>(path.string(), ": not a prosody encoder checkpoint");
  ProsodyAutoencoder model(ck.header.at("config").get<EncoderConfig>());
  restore_parameters(model.params(), ck);
  if (header) *header = ck.header;
  return model;
}

}  // namespace lpv
