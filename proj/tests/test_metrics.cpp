#include "lpv/corpus.hpp"
#include "lpv/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <functional>

using namespace lpv;

namespace {

void expect_valid_path(const DtwResult& r, const std::vector<double>& a, const std::vector<double>& b) {
  ASSERT_FALSE(r.path.empty());
  EXPECT_EQ(r.path.front(), std::make_pair(0, 0));
  EXPECT_EQ(r.path.back(), std::make_pair(static_cast<int>(a.size()) - 1, static_cast<int>(b.size()) - 1));
  double cost = std::abs(a[0] - b[0]);
  for (std::size_t k = 1; k < r.path.size(); ++k) {
    const int di = r.path[k].first - r.path[k - 1].first;
    const int dj = r.path[k].second - r.path[k - 1].second;
    EXPECT_TRUE((di == 1 && dj == 0) || (di == 0 && dj == 1) || (di == 1 && dj == 1));
    cost += std::abs(a[static_cast<std::size_t>(r.path[k].first)] - b[static_cast<std::size_t>(r.path[k].second)]);
  }
  EXPECT_DOUBLE_EQ(cost, r.distance);
  EXPECT_EQ(r.path_length, static_cast<int>(r.path.size()));
}

std::vector<double> random_samples(Rng& rng, std::size_t n, double mean, double sd) {
  std::vector<double> s(n);
  for (double& x : s) x = gaussian(rng, mean, sd);
  return s;
}

}  // namespace

TEST(Dtw, IdenticalSequences) {
  const std::vector<double> a = {3, 1, 4, 1, 5, 9, 2, 6};
  const auto r = dtw(a, a);
  EXPECT_EQ(r.distance, 0.0);
  EXPECT_EQ(r.path_length, 8);
  for (int k = 0; k < 8; ++k) EXPECT_EQ(r.path[static_cast<std::size_t>(k)], std::make_pair(k, k));
}

TEST(Dtw, TwoByTwoHandCase) {
  const std::vector<double> a = {0, 0}, b = {1, 1};
  const auto r = dtw(a, b);
  EXPECT_EQ(r.distance, 2.0);
  EXPECT_EQ(r.path_length, 2);
}

TEST(Dtw, MatchesPathEnumerationForShortTernarySequences) {
  const auto seqs = test::all_ternary_sequences(4);
  for (const auto& a : seqs)
    for (const auto& b : seqs) {
      const auto r = dtw(a, b);
      ASSERT_EQ(r.distance, test::enumerate_paths(a, b));
    }
}

TEST(Dtw, PathInvariantsSymmetryAndDiagonalBound) {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 12), m = 1 + uniform_index(rng, 12);
    const auto a = random_samples(rng, n, 100.0, 20.0);
    const auto b = random_samples(rng, m, 100.0, 20.0);
    const auto r = dtw(a, b);
    expect_valid_path(r, a, b);
    EXPECT_NEAR(r.distance, dtw(b, a).distance, 1e-9);
    if (n == m) {
      double diag = 0.0;
      for (std::size_t i = 0; i < n; ++i) diag += std::abs(a[i] - b[i]);
      EXPECT_LE(r.distance, diag + 1e-9);
    }
  }
  EXPECT_THROW(dtw(std::vector<double>{}, std::vector<double>{1.0}), ValidationError);
}

TEST(Dtw, TiesPreferDiagonal) {
  // All local costs zero: every path ties, the diagonal must win.
  const std::vector<double> a(3, 1.0), b(3, 1.0);
  EXPECT_EQ(dtw(a, b).path_length, 3);
}

TEST(PitchDistance, Examples) {
  const PitchContour p{{120, 130, 125}, {true, true, true}};
  EXPECT_EQ(pitch_dtw_distance(p, p), 0.0);
  const PitchContour a{{100, 100}, {true, true}}, b{{110, 110}, {true, true}};
  EXPECT_DOUBLE_EQ(pitch_dtw_distance(a, b), 10.0);
}

TEST(PitchDistance, UnvoicedFramesAreIgnored) {
  Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    PitchContour p1, p2;
    for (int i = 0; i < 8; ++i) {
      p1.values.push_back(gaussian(rng, 150, 30));
      p1.voiced.push_back(true);
      p2.values.push_back(gaussian(rng, 150, 30));
      p2.voiced.push_back(true);
    }
    const double base = pitch_dtw_distance(p1, p2);
    PitchContour padded;
    for (std::size_t i = 0; i < p1.values.size(); ++i) {
      padded.values.push_back(gaussian(rng, 500, 100));
      padded.voiced.push_back(false);
      padded.values.push_back(p1.values[i]);
      padded.voiced.push_back(true);
    }
    EXPECT_DOUBLE_EQ(pitch_dtw_distance(padded, p2), base);
  }
  const PitchContour silent{{100, 100}, {false, false}};
  EXPECT_THROW(pitch_dtw_distance(silent, silent), ValidationError);
}

TEST(Kde, SingleSampleIsNormalizedGaussian) {
  const std::vector<double> s = {10.0};
  const auto e = kde(s, 512, 0.5);
  EXPECT_EQ(e.bandwidth, 0.5);
  EXPECT_EQ(e.grid.size(), 512u);
  EXPECT_DOUBLE_EQ(e.grid.front(), 8.0);
  EXPECT_DOUBLE_EQ(e.grid.back(), 12.0);
  EXPECT_NEAR(trapezoid(e.grid, e.density), 1.0, 1e-12);
  std::size_t mode = 0, nearest = 0;
  for (std::size_t i = 0; i < e.grid.size(); ++i) {
    if (e.density[i] > e.density[mode]) mode = i;
    if (std::abs(e.grid[i] - 10.0) < std::abs(e.grid[nearest] - 10.0)) nearest = i;
  }
  EXPECT_EQ(std::abs(e.grid[mode] - 10.0), std::abs(e.grid[nearest] - 10.0));
  const double peak = 1.0 / (0.5 * std::sqrt(2.0 * M_PI));
  for (std::size_t i = 0; i < e.grid.size(); i += 37) {
    const double u = (e.grid[i] - 10.0) / 0.5;
    EXPECT_NEAR(e.density[i], peak * std::exp(-0.5 * u * u), 1e-3 * peak);
  }
  // Silverman on a single sample hits the floor.
  EXPECT_EQ(kde(s).bandwidth, 0.5);
}

TEST(Kde, SymmetricSamplesGiveSymmetricDensity) {
  const std::vector<double> s = {3.0, 4.5, 5.0, 5.5, 7.0};
  const auto e = kde(s);
  const std::size_t m = e.grid.size();
  for (std::size_t i = 0; i < m; ++i) {
    EXPECT_NEAR(e.grid[i] - 5.0, 5.0 - e.grid[m - 1 - i], 1e-9);
    EXPECT_NEAR(e.density[i], e.density[m - 1 - i], 1e-9);
  }
}

TEST(Kde, IntegratesToOne) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_samples(rng, 1 + uniform_index(rng, 40), 8.0, 1.0 + 5.0 * uniform01(rng));
    const auto e = kde(s);
    EXPECT_NEAR(trapezoid(e.grid, e.density), 1.0, 1e-6);
    for (double d : e.density) EXPECT_GE(d, 0.0);
  }
  EXPECT_THROW(kde(std::vector<double>{}), ValidationError);
}

TEST(Kde, SilvermanRule) {
  const std::vector<double> s = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20};
  const double mean = 10.5;
  double ss = 0.0;
  for (double x : s) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / 19.0);
  const double iqr = 15.25 - 5.75;  // linear-interpolated quartiles
  EXPECT_NEAR(silverman_bandwidth(s), 0.9 * std::min(sd, iqr / 1.34) * std::pow(20.0, -0.2), 1e-12);
  const std::vector<double> constant(9, 4.0);
  EXPECT_EQ(silverman_bandwidth(constant), 0.5);
}

TEST(Kl, IdenticalIsZero) {
  const std::vector<double> s = {2, 3, 3, 4, 6};
  EXPECT_EQ(kl_divergence(kde(s), kde(s)), 0.0);
}

TEST(Kl, SingletonsMatchClosedForm) {
  for (double h : {0.5, 0.8, 1.5}) {
    const auto p = kde(std::vector<double>{0.0}, 512, h);
    const auto q = kde(std::vector<double>{1.0}, 512, h);
    const double closed = test::gaussian_kl_equal_width(0.0, 1.0, h);
    EXPECT_NEAR(kl_divergence(p, q), closed, 1e-3 * closed) << "h=" << h;
  }
}

TEST(Kl, AgreesWithFineSimpsonOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_samples(rng, 3 + uniform_index(rng, 20), 6.0, 1.5);
    const auto b = random_samples(rng, 3 + uniform_index(rng, 20), 7.0, 2.0);
    const auto p = kde(a), q = kde(b);
    const double coarse = kl_divergence(p, q);
    const double fine = test::kl_simpson(p, q, 8192);
    EXPECT_NEAR(coarse, fine, 1e-4 * fine) << "trial " << trial;
    EXPECT_GE(coarse, 0.0);
  }
}

TEST(Kl, RejectsBadBandwidth) {
  auto p = kde(std::vector<double>{1.0});
  auto q = p;
  q.bandwidth = 0.0;
  EXPECT_THROW(kl_divergence(p, q), ValidationError);
}

TEST(DurationKl, IdenticalTablesGiveZero) {
  DurationTable t;
  t.system1 = {{1, {2, 3, 3}}, {5, {4, 4, 6, 7}}};
  t.system2 = t.system1;
  EXPECT_EQ(duration_kl(t), 0.0);
}

TEST(DurationKl, AveragesPerWordKl) {
  DurationTable t;
  t.system1 = {{1, {2, 3, 3}}, {2, {5, 6}}, {9, {3}}};
  t.system2 = {{1, {3, 4}}, {2, {5, 8, 9}}, {4, {2}}};
  const double k1 = kl_divergence(kde(t.system1[1]), kde(t.system2[1]));
  const double k2 = kl_divergence(kde(t.system1[2]), kde(t.system2[2]));
  const auto r = duration_kl_detail(t);
  EXPECT_EQ(r.dictionary_size, 2);
  EXPECT_NEAR(r.kl, (k1 + k2) / 2.0, 1e-15);
  DurationTable none;
  none.system1 = {{1, {2}}};
  none.system2 = {{2, {2}}};
  EXPECT_THROW(duration_kl(none), ValidationError);
}

TEST(DurationKl, PermutationInvariant) {
  DurationTable t;
  t.system1 = {{1, {2, 3, 7, 3}}, {2, {5, 6, 9}}};
  t.system2 = {{1, {3, 4, 4}}, {2, {5, 8, 9, 2}}};
  const double base = duration_kl(t);
  DurationTable s = t;
  std::reverse(s.system1[1].begin(), s.system1[1].end());
  std::rotate(s.system2[2].begin(), s.system2[2].begin() + 1, s.system2[2].end());
  EXPECT_NEAR(duration_kl(s), base, 1e-12);
  DurationTable renamed;
  renamed.system1 = {{7, t.system1[2]}, {8, t.system1[1]}};
  renamed.system2 = {{7, t.system2[2]}, {8, t.system2[1]}};
  EXPECT_NEAR(duration_kl(renamed), base, 1e-12);
}

TEST(DurationKl, TwoCorporaFromSameAndShiftedParameters) {
  SynthesisParams params;
  params.vocab_size = 6;
  params.n_clusters = 3;
  params.n_classes = 3;
  const SyntheticSpec spec = make_synthetic_spec(params);
  auto table_side = [](const GeneratedCorpus& c) {
    std::map<int, std::vector<double>> out;
    for (const auto& u : c.utterances)
      for (std::size_t i = 0; i < u.words.size(); ++i) out[u.words[i]].push_back(u.boundaries[i].length());
    return out;
  };
  DurationTable same;
  same.system1 = table_side(generate_corpus(spec, 600, Quality::high, 1));
  same.system2 = table_side(generate_corpus(spec, 600, Quality::high, 2));
  const double near = duration_kl(same);
  EXPECT_LT(near, 0.05);

  SyntheticSpec shifted = spec;
  shifted.duration_mean.array() += 3.0;
  DurationTable far = same;
  far.system2 = table_side(generate_corpus(shifted, 600, Quality::high, 2));
  EXPECT_GT(duration_kl(far), near);
}

TEST(Evaluate, PairsSharedUtterancesAndAttributesDurations) {
  ProsodyFile a, b;
  a.pitch = {{"u1", {100, 100}, {true, true}}, {"u2", {150, 160}, {true, true}}, {"only_a", {1}, {true}}};
  b.pitch = {{"u2", {150, 160}, {true, true}}, {"u1", {110, 110}, {true, true}}};
  a.durations = {{"u1", 4, 3, 1}, {"u2", 4, 5, 1}, {"only_a", 4, 40, 1}};
  b.durations = {{"u1", 4, 3, 2}, {"u2", 4, 5, 2}};
  const auto r = evaluate_systems(a, b);
  EXPECT_EQ(r.n_utts, 2);
  EXPECT_DOUBLE_EQ(r.d_pit_mean, 5.0);
  EXPECT_EQ(r.s_w, 1);
  EXPECT_EQ(r.kl_dur, 0.0);
}

TEST(ProsodyFile, RoundTripAndValidation) {
  lpv::test::TempDir dir;
  ProsodyFile f;
  f.provenance = {"abc", "def"};
  f.pitch = {{"u1", {101.25, 99.0 / 7.0}, {true, false}}};
  f.durations = {{"u1", 3, 4, 1}};
  write_prosody(dir / "p.jsonl", f);
  const auto back = read_prosody(dir / "p.jsonl");
  ASSERT_EQ(back.pitch.size(), 1u);
  EXPECT_EQ(back.pitch[0].pitch, f.pitch[0].pitch);
  EXPECT_EQ(back.pitch[0].voiced, f.pitch[0].voiced);
  EXPECT_EQ(back.durations[0].duration, 4);
  EXPECT_EQ(back.provenance.corpus_hash, "def");
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"utt_id":"u","word":1,"duration":3,"system":3})" << "\n";
  }
  EXPECT_THROW(read_prosody(dir / "bad.jsonl"), FormatError);
}
