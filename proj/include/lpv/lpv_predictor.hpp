#pragma once

// LPV predictor: a bidirectional self-attention context encoder over word
// tokens feeding a causal self-attention decoder over LPV indices. Context
// features are added position-wise to the decoder stream (the LPV sequence has
// one entry per word). Training runs in up to three stages: masked-token text
// pretraining (context encoder only), pretraining on LPVs from low-quality
// audio, and fine-tuning on high-quality LPVs.

#include "json.hpp"
#include "lpv/autograd.hpp"
#include "lpv/checkpoint.hpp"
#include "lpv/prosody_encoder.hpp"

#include <algorithm>
#include <filesystem>

namespace lpv {

enum class StageTag { text_pretrain, audio_pretrain, finetune };

inline std::string to_string(StageTag s) {
  switch (s) {
    case StageTag::text_pretrain: return "text_pretrain";
    case StageTag::audio_pretrain: return "audio_pretrain";
    case StageTag::finetune: return "finetune";
  }
  return "?";
}

inline StageTag parse_stage(const std::string& s) {
  if (s == "text_pretrain") return StageTag::text_pretrain;
  if (s == "audio_pretrain") return StageTag::audio_pretrain;
  if (s == "finetune") return StageTag::finetune;
  fail<ConfigError>("unknown stage \"", s, "\"");
}

struct PredictorConfig {
  int vocab_size = 64;
  int K = 16;
  int context_layers = 2;
  int ar_layers = 2;
  int hidden = 64;
  int heads = 2;
  int ffn = 128;
  int max_len = 32;
  double mask_prob = 0.15;
  double lr = 1e-3;
  double clip_norm = 1.0;
  int batch_size = 16;
  int text_steps = 1000;
  int audio_steps = 1000;
  int finetune_steps = 300;
  std::vector<std::string> stages = {"text_pretrain", "audio_pretrain", "finetune"};
  std::uint64_t seed = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PredictorConfig, vocab_size, K, context_layers, ar_layers, hidden, heads,
                                                ffn, max_len, mask_prob, lr, clip_norm, batch_size, text_steps,
                                                audio_steps, finetune_steps, stages, seed)

inline void validate(const PredictorConfig& c) {
  auto bad = [](auto&&... a) { fail<ConfigError>("predictor config: ", a...); };
  if (c.vocab_size < 1 || c.K < 1) bad("vocab_size and K must be positive");
  if (c.hidden < 1 || c.heads < 1 || c.hidden % c.heads != 0) bad("hidden must be divisible by heads");
  if (c.context_layers < 0 || c.ar_layers < 0 || c.ffn < 1 || c.max_len < 1) bad("invalid layer sizes");
  if (!(c.mask_prob > 0.0 && c.mask_prob < 1.0)) bad("mask_prob must lie in (0, 1)");
  if (!(c.lr > 0.0) || c.batch_size < 1) bad("lr and batch_size must be positive");
  std::vector<StageTag> seen;
  for (const auto& s : c.stages) {
    const StageTag t = parse_stage(s);
    if (!seen.empty() && static_cast<int>(t) <= static_cast<int>(seen.back())) bad("stages must be listed in pipeline order");
    seen.push_back(t);
  }
}

/// One training example: word tokens and (for AR stages) their LPV indices.
struct PredictorExample {
  std::string utt_id;
  std::vector<int> words;
  std::vector<int> lpv;
};

class LpvPredictor {
 public:
  explicit LpvPredictor(const PredictorConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    Rng rng(substream(cfg.seed, "predictor-init"));
    const int h = cfg.hidden;
    params_.add("tok_emb", ag::random_normal(cfg.vocab_size + 1, h, 0.5, rng));  // row V is MASK
    params_.add("ctx_pos", ag::random_normal(cfg.max_len, h, 0.5, rng));
    for (int i = 0; i < cfg.context_layers; ++i) add_block("ctx." + std::to_string(i), cfg.context_layers, rng);
    add_norm("ctx.ln");
    params_.add("text_head.w", Mat::Zero(h, cfg.vocab_size));
    params_.add("text_head.b", Mat::Zero(1, cfg.vocab_size));
    params_.add("idx_emb", ag::random_normal(cfg.K + 1, h, 0.5, rng));  // row K is BOS
    params_.add("ar_pos", ag::random_normal(cfg.max_len, h, 0.5, rng));
    for (int i = 0; i < cfg.ar_layers; ++i) add_block("ar." + std::to_string(i), cfg.ar_layers, rng);
    add_norm("ar.ln");
    params_.add("out.w", Mat::Zero(h, cfg.K));
    params_.add("out.b", Mat::Zero(1, cfg.K));
  }

  const PredictorConfig& config() const { return cfg_; }
  ag::ParameterStore& params() { return params_; }
  const ag::ParameterStore& params() const { return params_; }
  std::vector<StageTag>& stages() { return stages_; }
  const std::vector<StageTag>& stages() const { return stages_; }

  int mask_id() const { return cfg_.vocab_size; }
  int bos_id() const { return cfg_.K; }

  /// Parameters touched by masked text pretraining.
  std::vector<ag::Parameter*> text_parameters() { return params_.with_prefix({"tok_emb", "ctx_pos", "ctx.", "text_head."}); }

  /// Parameters of the autoregressive objective (everything but the text head).
  std::vector<ag::Parameter*> ar_parameters() {
    std::vector<ag::Parameter*> out;
    for (auto* p : params_.all())
      if (p->name.rfind("text_head.", 0) != 0) out.push_back(p);
    return out;
  }

  /// Bidirectional word-level context features (W x hidden). `tokens` may
  /// contain the MASK id.
  ag::Var context_encode(ag::Tape& t, std::span<const int> tokens) {
    check_length(tokens.size());
    for (int w : tokens)
      if (w < 0 || w > cfg_.vocab_size) fail<ValidationError>("context_encode: token ", w, " out of vocabulary");
    ag::Var x = t.gather_rows(t.param(params_.get("tok_emb")), tokens);
    x = t.add(x, t.head_rows(t.param(params_.get("ctx_pos")), static_cast<Eigen::Index>(tokens.size())));
    for (int i = 0; i < cfg_.context_layers; ++i) x = block(t, x, "ctx." + std::to_string(i), false);
    return norm(t, x, "ctx.ln");
  }

  /// Next-index logits (W x K) under teacher forcing with history `prev`
  /// (BOS followed by the first W-1 indices).
  ag::Var ar_logits(ag::Tape& t, ag::Var context, std::span<const int> prev) {
    for (int i : prev)
      if (i < 0 || i > cfg_.K) fail<ValidationError>("ar_logits: index ", i, " out of range");
    const auto n = static_cast<Eigen::Index>(prev.size());
    ag::Var x = t.gather_rows(t.param(params_.get("idx_emb")), prev);
    x = t.add(x, t.head_rows(t.param(params_.get("ar_pos")), n));
    x = t.add(x, t.head_rows(context, n));
    for (int i = 0; i < cfg_.ar_layers; ++i) x = block(t, x, "ar." + std::to_string(i), true);
    x = norm(t, x, "ar.ln");
    return t.linear(x, t.param(params_.get("out.w")), t.param(params_.get("out.b")));
  }

  std::vector<int> teacher_history(std::span<const int> lpv) const {
    std::vector<int> prev{bos_id()};
    prev.insert(prev.end(), lpv.begin(), lpv.end());
    prev.pop_back();
    return prev;
  }

  /// Mean next-index cross-entropy of one sequence, weighted by `weight`.
  ag::Var ar_loss(ag::Tape& t, std::span<const int> words, std::span<const int> lpv, double weight = 1.0) {
    if (words.size() != lpv.size())
      fail<ValidationError>("ar_loss: ", words.size(), " words but ", lpv.size(), " LPV indices");
    if (words.empty()) fail<ValidationError>("ar_loss: empty sequence");
    for (int i : lpv)
      if (i < 0 || i >= cfg_.K) fail<ValidationError>("ar_loss: index ", i, " outside [0, ", cfg_.K, ")");
    ag::Var ctx = context_encode(t, words);
    ag::Var logits = ar_logits(t, ctx, teacher_history(lpv));
    return t.cross_entropy(logits, lpv, weight / static_cast<double>(lpv.size()));
  }

  /// Masked-token loss of one sequence; `masked[i]` selects prediction sites.
  /// Returns weight * sum of per-site cross-entropies.
  ag::Var masked_loss(ag::Tape& t, std::span<const int> words, const std::vector<bool>& masked, double weight) {
    std::vector<int> tokens(words.begin(), words.end());
    std::vector<int> targets(words.size(), -1);
    for (std::size_t i = 0; i < words.size(); ++i)
      if (masked[i]) {
        tokens[i] = mask_id();
        targets[i] = words[i];
      }
    ag::Var ctx = context_encode(t, tokens);
    ag::Var logits = t.linear(ctx, t.param(params_.get("text_head.w")), t.param(params_.get("text_head.b")));
    return t.cross_entropy(logits, targets, weight);
  }

  void check_length(std::size_t n) const {
    if (n > static_cast<std::size_t>(cfg_.max_len))
      fail<ValidationError>("sequence of ", n, " words exceeds max_len ", cfg_.max_len);
  }

 private:
  void add_norm(const std::string& name) {
    params_.add(name + "_g", Mat::Ones(1, cfg_.hidden));
    params_.add(name + "_b", Mat::Zero(1, cfg_.hidden));
  }

  void add_block(const std::string& name, int depth, Rng& rng) {
    const int h = cfg_.hidden;
    const double s = std::sqrt(1.0 / h);
    const double s_out = s / std::sqrt(2.0 * depth);
    add_norm(name + ".ln1");
    params_.add(name + ".wq", ag::random_normal(h, h, s, rng));
    params_.add(name + ".wk", ag::random_normal(h, h, s, rng));
    params_.add(name + ".wv", ag::random_normal(h, h, s, rng));
    params_.add(name + ".wo", ag::random_normal(h, h, s_out, rng));
    params_.add(name + ".bo", Mat::Zero(1, h));
    add_norm(name + ".ln2");
    params_.add(name + ".w1", ag::random_normal(h, cfg_.ffn, s, rng));
    params_.add(name + ".b1", Mat::Zero(1, cfg_.ffn));
    params_.add(name + ".w2", ag::random_normal(cfg_.ffn, h, std::sqrt(1.0 / cfg_.ffn) / std::sqrt(2.0 * depth), rng));
    params_.add(name + ".b2", Mat::Zero(1, h));
  }

  ag::Var norm(ag::Tape& t, ag::Var x, const std::string& name) {
    return t.layer_norm(x, t.param(params_.get(name + "_g")), t.param(params_.get(name + "_b")));
  }

  /// Pre-norm transformer block.
  ag::Var block(ag::Tape& t, ag::Var x, const std::string& name, bool causal) {
    auto p = [&](const char* s) { return t.param(params_.get(name + s)); };
    ag::Var h = norm(t, x, name + ".ln1");
    ag::Var a = t.attention(t.matmul(h, p(".wq")), t.matmul(h, p(".wk")), t.matmul(h, p(".wv")), cfg_.heads, causal);
    x = t.add(x, t.linear(a, p(".wo"), p(".bo")));
    h = norm(t, x, name + ".ln2");
    h = t.relu(t.linear(h, p(".w1"), p(".b1")));
    return t.add(x, t.linear(h, p(".w2"), p(".b2")));
  }

  PredictorConfig cfg_;
  ag::ParameterStore params_;
  std::vector<StageTag> stages_;
};

// ---------------------------------------------------------------------------
// Training

/// Independent Bernoulli(mask_prob) selection of positions.
inline std::vector<bool> sample_mask(std::size_t n, double mask_prob, Rng& rng) {
  std::vector<bool> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = uniform01(rng) < mask_prob;
  return m;
}

/// Draws masks for a batch, redrawing until at least one site is selected.
inline std::vector<std::vector<bool>> sample_batch_masks(std::span<const PredictorExample* const> batch, double mask_prob,
                                                         Rng& rng) {
  std::size_t total_tokens = 0;
  for (const auto* ex : batch) total_tokens += ex->words.size();
  if (total_tokens == 0) fail<ValidationError>("masked batch has no tokens");
  for (;;) {
    std::vector<std::vector<bool>> masks;
    std::size_t selected = 0;
    for (const auto* ex : batch) {
      masks.push_back(sample_mask(ex->words.size(), mask_prob, rng));
      selected += static_cast<std::size_t>(std::count(masks.back().begin(), masks.back().end(), true));
    }
    if (selected > 0) return masks;
  }
}

/// Token-mean masked-prediction loss with gradients accumulated.
inline double masked_batch_loss(LpvPredictor& model, std::span<const PredictorExample* const> batch,
                                const std::vector<std::vector<bool>>& masks) {
  std::size_t selected = 0;
  for (const auto& m : masks) selected += static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
  if (selected == 0) fail<ValidationError>("masked_batch_loss: no masked positions");
  const double w = 1.0 / static_cast<double>(selected);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (std::count(masks[i].begin(), masks[i].end(), true) == 0) continue;
    ag::Tape t;
    ag::Var loss = model.masked_loss(t, batch[i]->words, masks[i], w);
    total += t.scalar(loss);
    t.backward(loss);
  }
  return total;
}

/// Sequence-mean teacher-forced loss with gradients accumulated.
inline double ar_batch_loss(LpvPredictor& model, std::span<const PredictorExample* const> batch) {
  const double w = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto* ex : batch) {
    ag::Tape t;
    ag::Var loss = model.ar_loss(t, ex->words, ex->lpv, w);
    total += t.scalar(loss);
    t.backward(loss);
  }
  return total;
}

/// Stateful trainer for one stage: owns the optimiser over the stage's
/// parameter group and a deterministic batch stream.
class PredictorStageTrainer {
 public:
  PredictorStageTrainer(LpvPredictor& model, StageTag stage)
      : model_(model),
        stage_(stage),
        adam_(stage == StageTag::text_pretrain ? model.text_parameters() : model.ar_parameters(), model.config().lr),
        rng_(substream(model.config().seed, "predictor/" + to_string(stage))) {}

  double step(std::span<const PredictorExample* const> batch) {
    model_.params().zero_grad();
    double loss = 0.0;
    if (stage_ == StageTag::text_pretrain) {
      const auto masks = sample_batch_masks(batch, model_.config().mask_prob, rng_);
      loss = masked_batch_loss(model_, batch, masks);
    } else {
      loss = ar_batch_loss(model_, batch);
    }
    if (!std::isfinite(loss))
      fail<NumericalError>(to_string(stage_), " loss is not finite at step ", adam_.steps());
    adam_.clip_grad_norm(model_.config().clip_norm);
    adam_.step();
    return loss;
  }

  std::vector<const PredictorExample*> next_batch(const std::vector<PredictorExample>& data) {
    std::vector<const PredictorExample*> batch;
    for (int i = 0; i < model_.config().batch_size; ++i) {
      if (cursor_ >= order_.size()) {
        order_.resize(data.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        for (std::size_t j = order_.size(); j > 1; --j) std::swap(order_[j - 1], order_[uniform_index(rng_, j)]);
        cursor_ = 0;
      }
      batch.push_back(&data[order_[cursor_++]]);
    }
    return batch;
  }

  /// Runs `steps` steps over `data`, returning the per-step losses, and
  /// appends the stage tag to the model's history.
  std::vector<double> run(const std::vector<PredictorExample>& data, int steps) {
    if (data.empty()) fail<ValidationError>(to_string(stage_), ": empty training set");
    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(steps));
    for (int s = 0; s < steps; ++s) losses.push_back(step(next_batch(data)));
    model_.stages().push_back(stage_);
    return losses;
  }

 private:
  LpvPredictor& model_;
  StageTag stage_;
  ag::Adam adam_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Refuses to run `next` unless every configured stage before it is already in
/// the model's history, in order.
inline void check_stage_order(const std::vector<std::string>& declared, const std::vector<StageTag>& history,
                              StageTag next, bool allow_skip = false) {
  if (allow_skip) return;
  std::vector<StageTag> expected;
  for (const auto& s : declared) {
    const StageTag t = parse_stage(s);
    if (t == next) break;
    expected.push_back(t);
  }
  if (history != expected) {
    std::string want, have;
    for (auto t : expected) want += to_string(t) + " ";
    for (auto t : history) have += to_string(t) + " ";
    fail<StageOrderError>("stage ", to_string(next), " requires completed stages [ ", want, "] but checkpoint has [ ",
                          have, "]");
  }
}

/// Token-weighted mean next-index cross-entropy over a set of sequences.
inline double heldout_cross_entropy(LpvPredictor& model, const std::vector<PredictorExample>& data) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : data) {
    ag::Tape t;
    total += t.scalar(model.ar_loss(t, ex.words, ex.lpv, static_cast<double>(ex.lpv.size())));
    tokens += ex.lpv.size();
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

// ---------------------------------------------------------------------------
// Inference

enum class DecodeMode { greedy, sample };

/// Left-to-right decoding, one index per word.
inline std::vector<int> generate(LpvPredictor& model, std::span<const int> words, DecodeMode mode,
                                 double temperature = 1.0, std::uint64_t seed = 0) {
  model.check_length(words.size());
  if (mode == DecodeMode::sample && !(temperature > 0.0)) fail<ValidationError>("generate: temperature must be > 0");
  Rng rng(substream(seed, "generate"));
  ag::Tape ctx_tape;
  const Mat ctx = ctx_tape.value(model.context_encode(ctx_tape, words));
  std::vector<int> prev{model.bos_id()};
  std::vector<int> out;
  const int k = model.config().K;
  for (std::size_t t = 0; t < words.size(); ++t) {
    ag::Tape tape;
    const ag::Var logits = model.ar_logits(tape, tape.constant(ctx.topRows(static_cast<Eigen::Index>(prev.size()))), prev);
    const RowVec last = tape.value(logits).row(static_cast<Eigen::Index>(prev.size()) - 1);
    int pick = 0;
    if (mode == DecodeMode::greedy) {
      for (int j = 1; j < k; ++j)
        if (last(j) > last(pick)) pick = j;
    } else {
      const double mx = last.maxCoeff();
      std::vector<double> w(static_cast<std::size_t>(k));
      for (int j = 0; j < k; ++j) w[static_cast<std::size_t>(j)] = std::exp((last(j) - mx) / temperature);
      pick = static_cast<int>(sample_categorical(rng, w));
    }
    out.push_back(pick);
    prev.push_back(pick);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint

inline void save_predictor(const std::filesystem::path& path, const LpvPredictor& model, nlohmann::json meta = {}) {
  if (meta.is_null()) meta = nlohmann::json::object();
  meta["kind"] = "lpv_predictor";
  meta["config"] = model.config();
  std::vector<std::string> stages;
  for (auto s : model.stages()) stages.push_back(to_string(s));
  meta["stages"] = stages;
  save_checkpoint(path, std::move(meta), model.params());
}

inline LpvPredictor load_predictor(const std::filesystem::path& path, nlohmann::json* header = nullptr) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.header.value("kind", std::string{}) != "lpv_predictor")
    fail<FormatError>(path.string(), ": not an LPV predictor checkpoint");
  LpvPredictor model(ck.header.at("config").get<PredictorConfig>());
  restore_parameters(model.params(), ck);
  for (const auto& s : ck.header.at("stages")) model.stages().push_back(parse_stage(s.get<std::string>()));
  if (header) *header = ck.header;
  return model;
}

}  // namespace lpv
