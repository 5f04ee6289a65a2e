#include "gradcheck.hpp"
#include "lpv/prosody_encoder.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace lpv;

namespace {

struct ZeroNoiseSet {
  SyntheticSpec spec;
  GeneratedCorpus corpus;
  std::vector<EncoderInput> inputs;
};

ZeroNoiseSet zero_noise_set(int n_utts, std::uint64_t seed, int clusters = 8) {
  SynthesisParams p;
  p.noise_sigma = 0.0;
  p.n_clusters = clusters;
  p.n_classes = clusters;
  p.seed = seed;
  ZeroNoiseSet s{make_synthetic_spec(p), {}, {}};
  s.corpus = generate_corpus(s.spec, n_utts, Quality::high, seed);
  for (const auto& u : s.corpus.utterances) s.inputs.push_back(make_encoder_input(u, 20));
  return s;
}

EncoderConfig small_config() {
  EncoderConfig c;
  c.hidden = 6;
  c.code_dim = 4;
  c.kernel = 3;
  c.frame_layers = 2;
  c.word_layers = 1;
  c.n_low_bands = 5;
  c.warmup_steps = 2;
  c.total_steps = 4;
  return c;
}

std::vector<EncoderInput> small_inputs(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<EncoderInput> out;
  for (int u = 0; u < 2; ++u) {
    EncoderInput in;
    in.id = "u" + std::to_string(u);
    in.low_band = ag::random_normal(7 + u, 5, 1.0, rng);
    in.segments = u == 0 ? std::vector<std::pair<int, int>>{{0, 3}, {3, 7}} : std::vector<std::pair<int, int>>{{0, 2}, {2, 5}, {5, 8}};
    out.push_back(std::move(in));
  }
  return out;
}

std::vector<const EncoderInput*> pointers(const std::vector<EncoderInput>& v) {
  std::vector<const EncoderInput*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

std::vector<int> flat(const std::vector<std::vector<int>>& v) {
  std::vector<int> out;
  for (const auto& x : v) out.insert(out.end(), x.begin(), x.end());
  return out;
}

}  // namespace

TEST(LowBand, SliceExamples) {
  const Mat m = Mat::Random(4, 20);
  EXPECT_EQ(extract_low_band(m, 20), m);
  Mat ramp(1, 80);
  for (int i = 0; i < 80; ++i) ramp(0, i) = i;
  const Mat low = extract_low_band(ramp, 20);
  ASSERT_EQ(low.cols(), 20);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(low(0, i), i);
  EXPECT_THROW(extract_low_band(Mat::Zero(2, 10), 20), ValidationError);
}

TEST(LowBand, MatchesColumnLoopAndSurvivesFileRoundTrip) {
  lpv::test::TempDir dir;
  Rng rng(3);
  const Mat m = ag::random_normal(7, 80, 1.0, rng).cast<float>().cast<double>();
  const Mat low = extract_low_band(m, 20);
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 20; ++c) EXPECT_EQ(low(r, c), m(r, c));
  write_features(m, dir / "f.lpvf");
  EXPECT_EQ(extract_low_band(read_features(dir / "f.lpvf"), 20), low);
}

TEST(WordPool, Examples) {
  const Mat c = Mat::Constant(5, 3, 2.5);
  const std::vector<Boundary> one = {{0, 5}};
  EXPECT_EQ(word_pool(c, one), Mat::Constant(1, 3, 2.5));
  Mat two(2, 2);
  two << 1, 1, 3, 3;
  const std::vector<Boundary> both = {{0, 2}};
  EXPECT_EQ(word_pool(two, both), Mat::Constant(1, 2, 2.0));
  const std::vector<Boundary> empty = {{0, 0}};
  EXPECT_THROW(word_pool(two, empty), ValidationError);
  const std::vector<Boundary> beyond = {{0, 3}};
  EXPECT_THROW(word_pool(two, beyond), ValidationError);
}

TEST(WordPool, MatchesReverseOrderSumAndIsPermutationInvariant) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat h = ag::random_normal(12, 4, 1.0, rng);
    const std::vector<Boundary> b = {{0, 3}, {3, 4}, {4, 9}, {9, 12}};
    const Mat pooled = word_pool(h, b);
    Mat shuffled = h;
    for (const auto& w : b)
      for (int f = w.start, g = w.end - 1; f < g; ++f, --g) shuffled.row(f).swap(shuffled.row(g));
    const Mat pooled_shuffled = word_pool(shuffled, b);
    for (std::size_t w = 0; w < b.size(); ++w)
      for (int c = 0; c < 4; ++c) {
        double s = 0.0;
        for (int f = b[w].end - 1; f >= b[w].start; --f) s += h(f, c);
        EXPECT_NEAR(pooled(static_cast<Eigen::Index>(w), c), s / b[w].length(), 1e-12);
        EXPECT_NEAR(pooled_shuffled(static_cast<Eigen::Index>(w), c), pooled(static_cast<Eigen::Index>(w), c), 1e-12);
      }
  }
}

TEST(Forward, WarmupBypassesQuantizer) {
  const auto inputs = small_inputs(1);
  ProsodyAutoencoder model(small_config());
  ag::Tape t;
  const auto fwd = model.forward(t, inputs[0], nullptr, Phase::warmup);
  EXPECT_TRUE(fwd.indices.empty());
  EXPECT_FALSE(fwd.commit_loss.has_value());
  EXPECT_EQ(t.value(fwd.bottleneck), t.value(fwd.z));
  EXPECT_EQ(t.scalar(fwd.total), t.scalar(fwd.recon_loss));
}

TEST(Forward, CommitmentVanishesOnCodeVectors) {
  const auto inputs = small_inputs(2);
  ProsodyAutoencoder model(small_config());
  Mat z;
  {
    ag::Tape t;
    z = t.value(model.encode(t, inputs[0]));
  }
  Codebook cb = make_codebook(4, 4);
  cb.embeddings.topRows(z.rows()) = z;
  cb.embeddings.bottomRows(4 - z.rows()).setConstant(50.0);
  cb.initialized = true;
  ag::Tape t;
  const auto fwd = model.forward(t, inputs[0], &cb, Phase::quantized);
  ASSERT_TRUE(fwd.commit_loss.has_value());
  EXPECT_EQ(t.scalar(*fwd.commit_loss), 0.0);
  EXPECT_EQ(fwd.indices, (std::vector<int>{0, 1}));
  EXPECT_THROW(model.forward(t, inputs[0], nullptr, Phase::quantized), ValidationError);
}

TEST(Forward, QuantizedBottleneckCarriesCodeValues) {
  const auto inputs = small_inputs(3);
  ProsodyAutoencoder model(small_config());
  Codebook cb = make_codebook(3, 4);
  init_random(cb, 5);
  ag::Tape t;
  const auto fwd = model.forward(t, inputs[1], &cb, Phase::quantized);
  for (std::size_t w = 0; w < fwd.indices.size(); ++w)
    EXPECT_LT((t.value(fwd.bottleneck).row(static_cast<Eigen::Index>(w)) - cb.embeddings.row(fwd.indices[w])).norm(), 1e-12);
}

TEST(Gradients, WarmupLossMatchesFiniteDifferences) {
  const auto inputs = small_inputs(4);
  const auto batch = pointers(inputs);
  ProsodyAutoencoder model(small_config());
  const auto report = lpv::test::gradient_check(model.params(), [&](bool back) {
    if (back) return batch_loss_and_grad(model, batch, nullptr, Phase::warmup).total;
    double total = 0.0;
    for (const auto* in : batch) {
      ag::Tape t;
      total += t.scalar(model.forward(t, *in, nullptr, Phase::warmup).total) / batch.size();
    }
    return total;
  });
  for (const auto& e : report) EXPECT_LT(e.rel_error, 1e-4) << e.name;
}

TEST(Gradients, QuantizedLossWithCommitmentMatchesFiniteDifferences) {
  const auto inputs = small_inputs(5);
  const auto batch = pointers(inputs);
  EncoderConfig cfg = small_config();
  cfg.commitment_beta = 0.25;
  ProsodyAutoencoder model(cfg);
  Codebook cb = make_codebook(3, cfg.code_dim);
  init_random(cb, 9, 0.5);
  const auto frozen = freeze_quantization(model, batch, cb);
  const auto report = lpv::test::gradient_check(model.params(), [&](bool back) {
    if (back) return batch_loss_and_grad(model, batch, nullptr, Phase::quantized, nullptr, nullptr, &frozen).total;
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ag::Tape t;
      total += t.scalar(model.forward(t, *batch[i], nullptr, Phase::quantized, &frozen[i]).total) / batch.size();
    }
    return total;
  });
  for (const auto& e : report) EXPECT_LT(e.rel_error, 1e-4) << e.name;
  // The commitment term contributes a non-zero gradient to the projection.
  ag::Tape t;
  EXPECT_GT(t.scalar(model.forward(t, *batch[0], nullptr, Phase::quantized, &frozen[0]).commit_loss.value()), 0.0);
}

TEST(Schedule, PhaseFlipsAtWarmupStep) {
  const auto set = zero_noise_set(12, 2);
  EncoderConfig cfg;
  cfg.warmup_steps = 30;
  cfg.total_steps = 40;
  cfg.buffer_factor = 4;
  ProsodyAutoencoder model(cfg);
  Codebook cb = make_codebook(8, cfg.code_dim);
  const Codebook pristine = cb;
  TrainState state(model, cb);
  std::size_t buffered = 0;
  while (state.step < cfg.total_steps) {
    const int step = state.step;
    const auto s = train_step(model, next_batch(state, set.inputs, cfg.batch_size), cb, state);
    if (step < cfg.warmup_steps) {
      EXPECT_EQ(s.phase, Phase::warmup) << step;
      EXPECT_FALSE(cb.initialized);
      EXPECT_EQ(cb.embeddings, pristine.embeddings);
      EXPECT_GE(state.buffer.size(), buffered);
      buffered = state.buffer.size();
    } else {
      EXPECT_EQ(s.phase, Phase::quantized) << step;
      EXPECT_TRUE(cb.initialized);
      EXPECT_EQ(state.buffer.size(), buffered);
    }
    if (step == cfg.warmup_steps - 1) {
      EXPECT_FALSE(cb.initialized);
    }
  }
  EXPECT_EQ(buffered, 32u);
  EXPECT_THROW(train_step(model, next_batch(state, set.inputs, 1), cb, state), ValidationError);
}

TEST(Schedule, BufferOnlyFedInFinalWindow) {
  EncoderConfig cfg;
  cfg.warmup_steps = 100;
  cfg.total_steps = 101;
  EXPECT_EQ(buffer_window(cfg), 10);
  cfg.buffer_window = 500;
  EXPECT_EQ(buffer_window(cfg), 100);
}

TEST(Reservoir, KeepsUniformSample) {
  std::vector<int> hits(100, 0);
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    Reservoir r(10, seed);
    for (int i = 0; i < 100; ++i) r.offer(RowVec::Constant(1, static_cast<double>(i)));
    ASSERT_EQ(r.size(), 10u);
    const Mat m = r.matrix();
    for (Eigen::Index i = 0; i < m.rows(); ++i) ++hits[static_cast<std::size_t>(m(i, 0))];
  }
  // Each item is kept with probability 0.1: 40 expected hits, sd about 6.
  for (int h : hits) {
    EXPECT_GT(h, 15);
    EXPECT_LT(h, 70);
  }
}

TEST(Training, IdenticalSeedsGiveIdenticalCurves) {
  const auto set = zero_noise_set(10, 3);
  EncoderConfig cfg;
  cfg.warmup_steps = 40;
  cfg.total_steps = 60;
  cfg.buffer_factor = 2;
  auto run = [&] {
    ProsodyAutoencoder model(cfg);
    Codebook cb = make_codebook(8, cfg.code_dim);
    std::vector<double> curve;
    for (const auto& s : train_encoder(model, cb, set.inputs)) curve.push_back(s.total);
    return curve;
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, NonFiniteLossAborts) {
  const auto set = zero_noise_set(4, 4);
  EncoderConfig cfg;
  cfg.warmup_steps = 5;
  cfg.total_steps = 10;
  ProsodyAutoencoder model(cfg);
  model.params().get("dec.b").value(0, 0) = std::nan("");
  Codebook cb = make_codebook(8, cfg.code_dim);
  try {
    train_encoder(model, cb, set.inputs);
    FAIL() << "expected a numerical abort";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

class ZeroNoiseRecovery : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    set_ = new ZeroNoiseSet(zero_noise_set(100, 1));
    EncoderConfig cfg;
    model_ = new ProsodyAutoencoder(cfg);
    cb_ = new Codebook(make_codebook(8, cfg.code_dim));
    train_encoder(*model_, *cb_, set_->inputs);
  }
  static void TearDownTestSuite() {
    delete set_;
    delete model_;
    delete cb_;
  }
  static ZeroNoiseSet* set_;
  static ProsodyAutoencoder* model_;
  static Codebook* cb_;
};
ZeroNoiseSet* ZeroNoiseRecovery::set_ = nullptr;
ProsodyAutoencoder* ZeroNoiseRecovery::model_ = nullptr;
Codebook* ZeroNoiseRecovery::cb_ = nullptr;

TEST_F(ZeroNoiseRecovery, ReconstructionBelowFloor) {
  double mse = 0.0;
  for (const auto& in : set_->inputs) {
    ag::Tape t;
    mse += t.scalar(model_->forward(t, in, cb_, Phase::quantized).recon_loss);
  }
  EXPECT_LT(mse / set_->inputs.size(), 1e-3);
}

TEST_F(ZeroNoiseRecovery, CodesRecoverHiddenClusters) {
  UsageStats usage;
  const auto lpv = extract_lpv(*model_, *cb_, set_->corpus.utterances, &usage);
  std::vector<std::vector<int>> idx;
  for (const auto& s : lpv) idx.push_back(s.indices);
  const auto codes = flat(idx);
  const auto labels = flat(set_->corpus.clusters);
  EXPECT_GE(usage.active_codes, 8);
  EXPECT_GE(bijective_purity(codes, labels, 8, 8), 0.99);
}

TEST_F(ZeroNoiseRecovery, ExtractionIsDeterministicAndShaped) {
  lpv::test::TempDir dir;
  const std::vector<Utterance> single = {set_->corpus.utterances[0]};
  const auto one = extract_lpv(*model_, *cb_, single);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].indices.size(), single[0].words.size());
  write_lpv(dir / "a.jsonl", extract_lpv(*model_, *cb_, set_->corpus.utterances), {"c", "d"});
  write_lpv(dir / "b.jsonl", extract_lpv(*model_, *cb_, set_->corpus.utterances), {"c", "d"});
  EXPECT_EQ(io::read_file(dir / "a.jsonl"), io::read_file(dir / "b.jsonl"));
  Provenance prov;
  const auto back = read_lpv(dir / "a.jsonl", &prov);
  EXPECT_EQ(back.size(), set_->corpus.utterances.size());
  EXPECT_EQ(prov.config_hash, "c");
}

TEST_F(ZeroNoiseRecovery, CheckpointRoundTrip) {
  lpv::test::TempDir dir;
  save_encoder(dir / "enc.lpvm", *model_, {{"stage", "train-encoder"}});
  nlohmann::json header;
  ProsodyAutoencoder loaded = load_encoder(dir / "enc.lpvm", &header);
  EXPECT_EQ(header.at("stage"), "train-encoder");
  EXPECT_EQ(loaded.config().hidden, model_->config().hidden);
  for (const auto* p : model_->params().all())
    EXPECT_EQ(loaded.params().get(p->name).value, p->value.cast<float>().cast<double>()) << p->name;
  std::string bytes = io::read_file(dir / "enc.lpvm");
  bytes.resize(bytes.size() - 4);
  io::write_file(dir / "cut.lpvm", bytes);
  EXPECT_THROW(load_encoder(dir / "cut.lpvm"), FormatError);
}

TEST(EncoderConfig, Validation) {
  EncoderConfig c;
  c.warmup_steps = c.total_steps;
  EXPECT_THROW(ProsodyAutoencoder{c}, ConfigError);
  c = EncoderConfig{};
  c.kernel = 4;
  EXPECT_THROW(validate(c), ConfigError);
  c = EncoderConfig{};
  c.n_low_bands = 0;
  EXPECT_THROW(validate(c), ConfigError);
  const nlohmann::json j = EncoderConfig{};
  EXPECT_EQ(j.at("warmup_steps"), 2000);
  EXPECT_EQ(j.get<EncoderConfig>().hidden, 32);
}
