#pragma once

// Objective prosody metrics:
//   D_pit  = DTW(p1, p2) / l_path over voiced frames, |x - y| local cost
//   KL_dur = mean over shared words of KL(KDE(d1^w) || KDE(d2^w))

#include "lpv/common.hpp"
#include "lpv/prosody_records.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

namespace lpv {

struct DtwResult {
  double distance = 0.0;
  int path_length = 0;  // number of path nodes
  std::vector<std::pair<int, int>> path;
};

enum class DtwCost { absolute, log_absolute };

/// Full-grid DTW with steps {(1,0),(0,1),(1,1)}. Backtracking prefers the
/// diagonal, then (1,0), then (0,1) on ties.
inline DtwResult dtw(std::span<const double> a, std::span<const double> b, DtwCost cost = DtwCost::absolute) {
  if (a.empty() || b.empty()) fail<ValidationError>("dtw: empty sequence");
  const auto n = a.size();
  const auto m = b.size();
  auto local = [&](std::size_t i, std::size_t j) {
    return cost == DtwCost::absolute ? std::abs(a[i] - b[j]) : std::abs(std::log(a[i]) - std::log(b[j]));
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> acc(n * m, inf);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return acc[i * m + j]; };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double best = 0.0;
      if (i > 0 || j > 0) {
        best = inf;
        if (i > 0 && j > 0) best = std::min(best, at(i - 1, j - 1));
        if (i > 0) best = std::min(best, at(i - 1, j));
        if (j > 0) best = std::min(best, at(i, j - 1));
      }
      at(i, j) = best + local(i, j);
    }

  DtwResult r;
  r.distance = at(n - 1, m - 1);
  std::size_t i = n - 1, j = m - 1;
  r.path.emplace_back(static_cast<int>(i), static_cast<int>(j));
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const double diag = at(i - 1, j - 1), up = at(i - 1, j), left = at(i, j - 1);
      if (diag <= up && diag <= left) {
        --i;
        --j;
      } else if (up <= left) {
        --i;
      } else {
        --j;
      }
    } else if (i > 0) {
      --i;
    } else {
      --j;
    }
    r.path.emplace_back(static_cast<int>(i), static_cast<int>(j));
  }
  std::reverse(r.path.begin(), r.path.end());
  r.path_length = static_cast<int>(r.path.size());
  return r;
}

struct PitchContour {
  std::vector<double> values;
  std::vector<bool> voiced;
};

inline std::vector<double> voiced_values(const PitchContour& p) {
  if (p.values.size() != p.voiced.size()) fail<ValidationError>("pitch contour: values/voiced length mismatch");
  std::vector<double> out;
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    if (!p.voiced[i]) continue;
    if (!std::isfinite(p.values[i])) fail<ValidationError>("pitch contour: non-finite voiced value");
    out.push_back(p.values[i]);
  }
  return out;
}

/// Average pitch DTW distance over voiced frames.
inline double pitch_dtw_distance(const PitchContour& p1, const PitchContour& p2, DtwCost cost = DtwCost::absolute) {
  const auto a = voiced_values(p1);
  const auto b = voiced_values(p2);
  if (a.empty() || b.empty()) fail<ValidationError>("pitch_dtw_distance: contour has no voiced frames");
  const DtwResult r = dtw(a, b, cost);
  return r.distance / r.path_length;
}

// ---------------------------------------------------------------------------
// Kernel density estimation

inline constexpr int kDefaultGridPoints = 512;
inline constexpr double kMinBandwidth = 0.5;

struct DensityEstimate {
  std::vector<double> grid;
  std::vector<double> density;
  double bandwidth = 0.0;
  std::vector<double> samples;  // kept so the estimate can be re-gridded
};

inline double trapezoid(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) s += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return s;
}

namespace detail {

inline double quantile(std::vector<double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline std::vector<double> uniform_grid(double lo, double hi, int m) {
  std::vector<double> g(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) g[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (m - 1);
  return g;
}

}  // namespace detail

/// Silverman's rule, 0.9 * min(sd, IQR/1.34) * n^(-1/5), floored at 0.5.
inline double silverman_bandwidth(std::span<const double> samples) {
  const auto n = static_cast<double>(samples.size());
  double sd = 0.0;
  if (samples.size() > 1) {
    const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
    double ss = 0.0;
    for (double s : samples) ss += (s - mean) * (s - mean);
    sd = std::sqrt(ss / (n - 1.0));
  }
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double iqr = detail::quantile(sorted, 0.75) - detail::quantile(sorted, 0.25);
  const double h = 0.9 * std::min(sd, iqr / 1.34) * std::pow(n, -0.2);
  return std::max(h, kMinBandwidth);
}

/// Gaussian KDE evaluated on `grid`, renormalised to unit trapezoid mass.
inline std::vector<double> kde_on_grid(std::span<const double> samples, double bandwidth, std::span<const double> grid) {
  if (!(bandwidth > 0.0)) fail<ValidationError>("kde: bandwidth must be positive");
  std::vector<double> d(grid.size(), 0.0);
  const double norm = 1.0 / (static_cast<double>(samples.size()) * bandwidth * std::sqrt(2.0 * M_PI));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double s = 0.0;
    for (double x : samples) {
      const double u = (grid[i] - x) / bandwidth;
      s += std::exp(-0.5 * u * u);
    }
    d[i] = s * norm;
  }
  const double mass = trapezoid(grid, d);
  if (mass > 0.0)
    for (double& v : d) v /= mass;
  return d;
}

/// KDE over [min - 4h, max + 4h]; a non-positive `bandwidth` selects Silverman's rule.
inline DensityEstimate kde(std::span<const double> samples, int grid_points = kDefaultGridPoints, double bandwidth = 0.0) {
  if (samples.empty()) fail<ValidationError>("kde: no samples");
  if (grid_points < 2) fail<ValidationError>("kde: need at least 2 grid points");
  DensityEstimate e;
  e.samples.assign(samples.begin(), samples.end());
  e.bandwidth = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(samples);
  const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
  e.grid = detail::uniform_grid(*lo - 4.0 * e.bandwidth, *hi + 4.0 * e.bandwidth, grid_points);
  e.density = kde_on_grid(e.samples, e.bandwidth, e.grid);
  return e;
}

inline constexpr double kDensityFloor = 1e-12;

/// KL(p || q) by trapezoid on a shared grid spanning both estimates.
inline double kl_divergence(const DensityEstimate& p, const DensityEstimate& q, int grid_points = kDefaultGridPoints) {
  if (!(p.bandwidth > 0.0) || !(q.bandwidth > 0.0)) fail<ValidationError>("kl_divergence: bandwidth must be positive");
  if (p.samples.empty() || q.samples.empty()) fail<ValidationError>("kl_divergence: estimate has no samples");
  const double lo = std::min(p.grid.front(), q.grid.front());
  const double hi = std::max(p.grid.back(), q.grid.back());
  const auto grid = detail::uniform_grid(lo, hi, grid_points);
  const auto pd = kde_on_grid(p.samples, p.bandwidth, grid);
  const auto qd = kde_on_grid(q.samples, q.bandwidth, grid);
  std::vector<double> integrand(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double a = std::max(pd[i], kDensityFloor);
    const double b = std::max(qd[i], kDensityFloor);
    integrand[i] = a * std::log(a / b);
  }
  return std::max(0.0, trapezoid(grid, integrand));
}

/// Per-word duration samples for two systems.
struct DurationTable {
  std::map<int, std::vector<double>> system1;
  std::map<int, std::vector<double>> system2;

  /// Words with samples in both systems.
  std::vector<int> shared_words() const {
    std::vector<int> out;
    for (const auto& [w, s] : system1)
      if (!s.empty() && system2.count(w) && !system2.at(w).empty()) out.push_back(w);
    return out;
  }
};

struct DurationKlResult {
  double kl = 0.0;
  int dictionary_size = 0;
  std::map<int, double> per_word;
};

inline DurationKlResult duration_kl_detail(const DurationTable& table, int grid_points = kDefaultGridPoints) {
  DurationKlResult r;
  const auto words = table.shared_words();
  if (words.empty()) fail<ValidationError>("duration_kl: no word has durations in both systems");
  for (int w : words) {
    for (double d : table.system1.at(w))
      if (d < 1.0) fail<ValidationError>("duration_kl: duration below one frame");
    for (double d : table.system2.at(w))
      if (d < 1.0) fail<ValidationError>("duration_kl: duration below one frame");
    const double k = kl_divergence(kde(table.system1.at(w), grid_points), kde(table.system2.at(w), grid_points), grid_points);
    r.per_word[w] = k;
    r.kl += k;
  }
  r.dictionary_size = static_cast<int>(words.size());
  r.kl /= r.dictionary_size;
  return r;
}

inline double duration_kl(const DurationTable& table) { return duration_kl_detail(table).kl; }

// ---------------------------------------------------------------------------
// System comparison over prosody record files

struct EvaluationResult {
  double d_pit_mean = 0.0;
  std::vector<std::pair<std::string, double>> d_pit_per_utt;
  double kl_dur = 0.0;
  int s_w = 0;
  int n_utts = 0;
};

/// Compares two systems on the utterances both contain. Duration records are
/// attributed to the system of the file they come from.
inline EvaluationResult evaluate_systems(const ProsodyFile& sys1, const ProsodyFile& sys2, DtwCost cost = DtwCost::absolute) {
  std::map<std::string, const PitchRecord*> p2;
  for (const auto& r : sys2.pitch) p2[r.utt_id] = &r;
  std::map<std::string, bool> shared;
  EvaluationResult res;
  for (const auto& r : sys1.pitch) {
    auto it = p2.find(r.utt_id);
    if (it == p2.end()) continue;
    shared[r.utt_id] = true;
    const double d = pitch_dtw_distance({r.pitch, r.voiced}, {it->second->pitch, it->second->voiced}, cost);
    res.d_pit_per_utt.emplace_back(r.utt_id, d);
    res.d_pit_mean += d;
  }
  if (res.d_pit_per_utt.empty()) fail<ValidationError>("evaluate: the two systems share no utterances");
  res.n_utts = static_cast<int>(res.d_pit_per_utt.size());
  res.d_pit_mean /= res.n_utts;

  DurationTable table;
  for (const auto& d : sys1.durations)
    if (shared.count(d.utt_id)) table.system1[d.word].push_back(d.duration);
  for (const auto& d : sys2.durations)
    if (shared.count(d.utt_id)) table.system2[d.word].push_back(d.duration);
  const auto kl = duration_kl_detail(table);
  res.kl_dur = kl.kl;
  res.s_w = kl.dictionary_size;
  return res;
}

}  // namespace lpv
