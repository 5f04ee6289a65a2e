#include "gradcheck.hpp"
#include "lpv/lpv_predictor.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace lpv;

namespace {

PredictorConfig tiny_config(int vocab, int k) {
  PredictorConfig c;
  c.vocab_size = vocab;
  c.K = k;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 12;
  c.context_layers = 1;
  c.ar_layers = 1;
  c.max_len = 10;
  return c;
}

void randomize(LpvPredictor& m, std::uint64_t seed, double scale = 0.4) {
  Rng rng(seed);
  for (auto* p : m.params().all()) p->value = ag::random_normal(p->value.rows(), p->value.cols(), scale, rng);
}

// Sequences where word w always carries LPV index (w mod K).
std::vector<PredictorExample> mapping_corpus(int n, int vocab, int k, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PredictorExample> out;
  for (int i = 0; i < n; ++i) {
    PredictorExample ex;
    ex.utt_id = "s" + std::to_string(i);
    const int len = 3 + static_cast<int>(uniform_index(rng, 6));
    for (int j = 0; j < len; ++j) {
      const int w = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(vocab)));
      ex.words.push_back(w);
      ex.lpv.push_back(w % k);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<const PredictorExample*> pointers(const std::vector<PredictorExample>& v) {
  std::vector<const PredictorExample*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

}  // namespace

TEST(ContextEncoder, ShapeAndDeterminism) {
  LpvPredictor m(tiny_config(20, 4));
  const std::vector<int> words = {1, 5, 7, 2, 2, 9, 19};
  ag::Tape a, b;
  const Mat x = a.value(m.context_encode(a, words));
  EXPECT_EQ(x.rows(), 7);
  EXPECT_EQ(x.cols(), 8);
  EXPECT_EQ(x, b.value(m.context_encode(b, words)));
  ag::Tape c;
  const std::vector<int> oov = {20 + 1};
  EXPECT_THROW(m.context_encode(c, oov), ValidationError);
  const std::vector<int> longer(11, 1);
  EXPECT_THROW(m.context_encode(c, longer), ValidationError);
}

TEST(ContextEncoder, ZeroMixingWeightsArePositionLocal) {
  LpvPredictor m(tiny_config(20, 4));
  for (auto* p : m.params().with_prefix({"ctx.0."}))
    if (p->name.find("ln") == std::string::npos) p->value.setZero();
  const std::vector<int> a = {3, 4, 5, 6};
  const std::vector<int> b = {3, 6, 5, 4};
  ag::Tape ta, tb;
  const Mat xa = ta.value(m.context_encode(ta, a));
  const Mat xb = tb.value(m.context_encode(tb, b));
  EXPECT_EQ(xa.row(0), xb.row(0));
  EXPECT_EQ(xa.row(2), xb.row(2));
  EXPECT_NE(xa.row(1), xb.row(1));
}

TEST(ContextEncoder, PermutationChangesSwappedPositionsWhenMixing) {
  LpvPredictor m(tiny_config(20, 4));
  randomize(m, 3);
  const std::vector<int> a = {3, 4, 5, 6}, b = {3, 6, 5, 4};
  ag::Tape ta, tb;
  const Mat xa = ta.value(m.context_encode(ta, a));
  const Mat xb = tb.value(m.context_encode(tb, b));
  EXPECT_NE(xa.row(1), xb.row(1));
  EXPECT_NE(xa.row(3), xb.row(3));
}

TEST(ArLoss, ZeroHeadGivesLogK) {
  for (int k : {2, 16, 128}) {
    PredictorConfig cfg = tiny_config(30, k);
    LpvPredictor m(cfg);
    ag::Tape t;
    const std::vector<int> words = {1, 2, 3, 4, 29};
    std::vector<int> lpv = {0, 1 % k, 0, (k - 1), 1 % k};
    EXPECT_NEAR(t.scalar(m.ar_loss(t, words, lpv)), std::log(static_cast<double>(k)), 1e-6) << k;
  }
  LpvPredictor m128(tiny_config(30, 128));
  ag::Tape t;
  const std::vector<int> w = {0}, i = {5};
  EXPECT_NEAR(t.scalar(m128.ar_loss(t, w, i)), 4.8520, 5e-5);
}

TEST(ArLoss, SingleClassIsZeroAndErrorsAreReported) {
  LpvPredictor m(tiny_config(10, 1));
  randomize(m, 4);
  ag::Tape t;
  const std::vector<int> words = {1, 2, 3}, lpv = {0, 0, 0};
  EXPECT_NEAR(t.scalar(m.ar_loss(t, words, lpv)), 0.0, 1e-12);
  const std::vector<int> shorter = {0, 0};
  EXPECT_THROW(m.ar_loss(t, words, shorter), ValidationError);
  const std::vector<int> big = {0, 1, 0};
  EXPECT_THROW(m.ar_loss(t, words, big), ValidationError);
}

TEST(ArLoss, CausalInTeacherForcedStream) {
  LpvPredictor m(tiny_config(12, 5));
  randomize(m, 5);
  const std::vector<int> words = {1, 2, 3, 4, 5, 6};
  ag::Tape t;
  const Mat ctx = t.value(m.context_encode(t, words));
  std::vector<int> prev = {5, 0, 1, 2, 3, 4};
  for (std::size_t pos = 1; pos < prev.size(); ++pos) {
    ag::Tape a, b;
    const Mat la = a.value(m.ar_logits(a, a.constant(ctx), prev));
    auto changed = prev;
    changed[pos] = (changed[pos] + 2) % 5;
    const Mat lb = b.value(m.ar_logits(b, b.constant(ctx), changed));
    EXPECT_EQ(la.topRows(static_cast<Eigen::Index>(pos)), lb.topRows(static_cast<Eigen::Index>(pos))) << pos;
    EXPECT_NE(la.row(static_cast<Eigen::Index>(pos)), lb.row(static_cast<Eigen::Index>(pos))) << pos;
  }
}

TEST(Gradients, ArLossMatchesFiniteDifferences) {
  LpvPredictor m(tiny_config(7, 3));
  randomize(m, 6);
  const auto data = mapping_corpus(2, 7, 3, 1);
  const auto batch = pointers(data);
  const auto report = lpv::test::gradient_check(m.params(), [&](bool back) {
    if (back) return ar_batch_loss(m, batch);
    double total = 0.0;
    for (const auto* ex : batch) {
      ag::Tape t;
      total += t.scalar(m.ar_loss(t, ex->words, ex->lpv, 0.5));
    }
    return total;
  });
  for (const auto& e : report)
    if (e.name.rfind("text_head", 0) != 0) {
      EXPECT_LT(e.rel_error, 1e-4) << e.name;
    }
}

TEST(Gradients, MaskedLossMatchesFiniteDifferences) {
  LpvPredictor m(tiny_config(7, 3));
  randomize(m, 7);
  const auto data = mapping_corpus(2, 7, 3, 2);
  const auto batch = pointers(data);
  std::vector<std::vector<bool>> masks;
  for (const auto& ex : data) {
    std::vector<bool> mk(ex.words.size(), false);
    mk[0] = mk[ex.words.size() - 1] = true;
    masks.push_back(mk);
  }
  const auto report = lpv::test::gradient_check(m.params(), [&](bool back) {
    if (back) return masked_batch_loss(m, batch, masks);
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ag::Tape t;
      total += t.scalar(m.masked_loss(t, batch[i]->words, masks[i], 0.25));
    }
    return total;
  });
  for (const auto& e : report) {
    if (e.name.rfind("idx_emb", 0) == 0 || e.name.rfind("ar", 0) == 0 || e.name.rfind("out.", 0) == 0) {
      EXPECT_EQ(e.analytic_norm, 0.0) << e.name;
      continue;
    }
    EXPECT_LT(e.rel_error, 1e-4) << e.name;
  }
}

TEST(TextPretrain, FullMaskGivesLogV) {
  LpvPredictor m(tiny_config(23, 4));
  ag::Tape t;
  const std::vector<int> words = {1, 4, 9, 16, 22};
  const std::vector<bool> all(5, true);
  EXPECT_NEAR(t.scalar(m.masked_loss(t, words, all, 1.0 / 5.0)), std::log(23.0), 1e-9);
}

TEST(TextPretrain, EmpiricalMaskRate) {
  Rng rng(11);
  const auto m = sample_mask(100000, 0.15, rng);
  const double rate = static_cast<double>(std::count(m.begin(), m.end(), true)) / 1e5;
  EXPECT_NEAR(rate, 0.15, 0.01);
}

TEST(TextPretrain, BatchMasksNeverEmpty) {
  std::vector<PredictorExample> data(3);
  for (auto& ex : data) ex.words = {1};
  const auto batch = pointers(data);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto masks = sample_batch_masks(batch, 0.05, rng);
    int n = 0;
    for (const auto& mk : masks) n += static_cast<int>(std::count(mk.begin(), mk.end(), true));
    ASSERT_GT(n, 0);
  }
}

TEST(TextPretrain, LossFallsOnDeterministicBigrams) {
  PredictorConfig cfg = tiny_config(12, 4);
  cfg.hidden = 16;
  cfg.ffn = 32;
  cfg.batch_size = 8;
  cfg.lr = 1e-2;
  LpvPredictor m(cfg);
  std::vector<PredictorExample> data;
  for (int s = 0; s < 12; ++s) {
    PredictorExample ex;
    for (int j = 0; j < 8; ++j) ex.words.push_back((s + j) % 12);
    data.push_back(ex);
  }
  PredictorStageTrainer trainer(m, StageTag::text_pretrain);
  const Mat out_before = m.params().get("out.w").value;
  const auto losses = trainer.run(data, 200);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 20; ++i) {
    head += losses[static_cast<std::size_t>(i)];
    tail += losses[losses.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(tail, 0.75 * head);
  EXPECT_EQ(m.params().get("out.w").value, out_before);
  EXPECT_EQ(m.stages(), std::vector<StageTag>{StageTag::text_pretrain});
}

TEST(ArTraining, LearnsDeterministicMapping) {
  PredictorConfig cfg = tiny_config(12, 4);
  cfg.hidden = 16;
  cfg.ffn = 32;
  cfg.batch_size = 8;
  cfg.lr = 3e-3;
  LpvPredictor m(cfg);
  const auto train = mapping_corpus(200, 12, 4, 3);
  PredictorStageTrainer trainer(m, StageTag::audio_pretrain);
  trainer.run(train, 600);
  const auto test = mapping_corpus(100, 12, 4, 4);
  EXPECT_LT(heldout_cross_entropy(m, test), 0.05);
  long hit = 0, total = 0;
  for (const auto& ex : test) {
    const auto pred = generate(m, ex.words, DecodeMode::greedy);
    ASSERT_EQ(pred.size(), ex.words.size());
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == ex.words[i] % 4;
    total += static_cast<long>(pred.size());
  }
  EXPECT_GE(static_cast<double>(hit) / total, 0.99);
}

TEST(ArTraining, SmallStepDescends) {
  PredictorConfig cfg = tiny_config(10, 4);
  cfg.lr = 1e-5;
  LpvPredictor m(cfg);
  randomize(m, 8, 0.3);
  const auto data = mapping_corpus(4, 10, 4, 5);
  const auto batch = pointers(data);
  PredictorStageTrainer trainer(m, StageTag::finetune);
  const double before = trainer.step(batch);
  m.params().zero_grad();
  const double after = ar_batch_loss(m, batch);
  EXPECT_LE(after, before);
}

TEST(ArTraining, PretrainedStartHasLowerHeldoutLoss) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    PredictorConfig cfg = tiny_config(12, 4);
    cfg.hidden = 16;
    cfg.ffn = 32;
    cfg.seed = seed;
    const auto pre = mapping_corpus(100, 12, 4, 100 + seed);
    const auto held = mapping_corpus(30, 12, 4, 200 + seed);
    LpvPredictor scratch(cfg);
    LpvPredictor pretrained(cfg);
    PredictorStageTrainer(pretrained, StageTag::audio_pretrain).run(pre, 100);
    EXPECT_LT(heldout_cross_entropy(pretrained, held), heldout_cross_entropy(scratch, held)) << "seed " << seed;
  }
}

TEST(Generate, SingleCodeAndDeterminism) {
  LpvPredictor one(tiny_config(10, 1));
  randomize(one, 9);
  const std::vector<int> words = {1, 2, 3, 4};
  EXPECT_EQ(generate(one, words, DecodeMode::greedy), std::vector<int>(4, 0));
  EXPECT_EQ(generate(one, words, DecodeMode::sample, 1.0, 3), std::vector<int>(4, 0));

  LpvPredictor m(tiny_config(10, 6));
  randomize(m, 10);
  EXPECT_EQ(generate(m, words, DecodeMode::greedy), generate(m, words, DecodeMode::greedy));
  EXPECT_EQ(generate(m, words, DecodeMode::sample, 1.5, 7), generate(m, words, DecodeMode::sample, 1.5, 7));
  const std::vector<int> longer(11, 1);
  EXPECT_THROW(generate(m, longer, DecodeMode::greedy), ValidationError);
  EXPECT_THROW(generate(m, words, DecodeMode::sample, 0.0), ValidationError);
}

TEST(Generate, GreedyMatchesArgmaxOfTeacherForcedLogits) {
  LpvPredictor m(tiny_config(10, 5));
  randomize(m, 12);
  const std::vector<int> words = {3, 1, 4, 1, 5};
  const auto pred = generate(m, words, DecodeMode::greedy);
  ag::Tape t;
  const Mat logits = t.value(m.ar_logits(t, m.context_encode(t, words), m.teacher_history(pred)));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    EXPECT_EQ(arg, pred[static_cast<std::size_t>(i)]);
  }
}

TEST(Stages, OrderIsEnforced) {
  const std::vector<std::string> all = {"text_pretrain", "audio_pretrain", "finetune"};
  EXPECT_NO_THROW(check_stage_order(all, {}, StageTag::text_pretrain));
  EXPECT_NO_THROW(check_stage_order(all, {StageTag::text_pretrain, StageTag::audio_pretrain}, StageTag::finetune));
  EXPECT_THROW(check_stage_order(all, {StageTag::text_pretrain}, StageTag::finetune), StageOrderError);
  EXPECT_NO_THROW(check_stage_order(all, {StageTag::text_pretrain}, StageTag::finetune, true));
  const std::vector<std::string> no_audio = {"text_pretrain", "finetune"};
  EXPECT_NO_THROW(check_stage_order(no_audio, {StageTag::text_pretrain}, StageTag::finetune));
  PredictorConfig bad;
  bad.stages = {"finetune", "text_pretrain"};
  EXPECT_THROW(validate(bad), ConfigError);
  bad.stages = {"warmup"};
  EXPECT_THROW(validate(bad), ConfigError);
}

TEST(Stages, CheckpointRecordsHistory) {
  lpv::test::TempDir dir;
  PredictorConfig cfg = tiny_config(12, 4);
  LpvPredictor m(cfg);
  std::vector<PredictorExample> text(3);
  for (auto& ex : text) ex.words = {1, 2, 3, 4};
  const auto mapped = mapping_corpus(5, 12, 4, 1);
  PredictorStageTrainer(m, StageTag::text_pretrain).run(text, 2);
  PredictorStageTrainer(m, StageTag::audio_pretrain).run(mapped, 2);
  PredictorStageTrainer(m, StageTag::finetune).run(mapped, 2);
  save_predictor(dir / "p.lpvm", m);
  const LpvPredictor back = load_predictor(dir / "p.lpvm");
  EXPECT_EQ(back.stages(), (std::vector<StageTag>{StageTag::text_pretrain, StageTag::audio_pretrain, StageTag::finetune}));
  for (const auto* p : m.params().all())
    EXPECT_EQ(back.params().get(p->name).value, p->value.cast<float>().cast<double>()) << p->name;
}
