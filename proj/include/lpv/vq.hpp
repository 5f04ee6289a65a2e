#pragma once

// EMA vector-quantisation codebook, k-means (k-means++ seeded Lloyd) used to
// initialise it, and code-usage diagnostics.
//
// Codebook file ("LPVQ", little-endian):
//   magic | u32 version=1 | u32 K | u32 D | f32 gamma | f32 eps |
//   f32 e[K*D] | f32 ema_count[K] | f32 ema_sum[K*D]

#include "lpv/binary_io.hpp"
#include "lpv/common.hpp"

#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace lpv {

struct KMeansResult {
  Mat centroids;
  std::vector<int> assignments;
  double inertia = 0.0;
  int iterations = 0;
};

namespace detail {

inline int nearest_row(const Mat& centroids, const Eigen::Ref<const RowVec>& x, double* best_dist = nullptr) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const double d = (centroids.row(k) - x).squaredNorm();
    if (d < best_d) {  // strict: ties resolve to the lowest index
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  if (best_dist) *best_dist = best_d;
  return best;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded to
/// the point farthest from its current centroid.
inline KMeansResult kmeans(const Mat& points, int k, int max_iters, std::uint64_t seed) {
  const auto n = static_cast<int>(points.rows());
  if (k < 1) fail<ValidationError>("kmeans: K must be >= 1");
  if (n < k) fail<ValidationError>("kmeans: need at least K points (N=", n, ", K=", k, ")");
  if (!all_finite(points)) fail<ValidationError>("kmeans: non-finite input");

  Rng rng(substream(seed, "kmeans++"));
  KMeansResult res;
  res.centroids.resize(k, points.cols());
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  int pick = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(n)));
  for (int c = 0; c < k; ++c) {
    res.centroids.row(c) = points.row(pick);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      d2[static_cast<std::size_t>(i)] =
          std::min(d2[static_cast<std::size_t>(i)], (points.row(i) - res.centroids.row(c)).squaredNorm());
      total += d2[static_cast<std::size_t>(i)];
    }
    if (c + 1 == k) break;
    // Every point coincides with a centre: duplicate the first point.
    pick = total > 0.0 ? static_cast<int>(sample_categorical(rng, d2)) : 0;
  }

  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  std::vector<int> previous;
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int iter = 0; iter < max_iters; ++iter) {
    for (int i = 0; i < n; ++i)
      assign[static_cast<std::size_t>(i)] = detail::nearest_row(res.centroids, points.row(i), &dist[static_cast<std::size_t>(i)]);
    res.iterations = iter + 1;
    if (assign == previous) break;
    previous = assign;

    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    Mat sums = Mat::Zero(k, points.cols());
    for (int i = 0; i < n; ++i) {
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
      sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
    }
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0) res.centroids.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      int far = -1;
      double far_d = -1.0;
      for (int i = 0; i < n; ++i) {
        const int owner = assign[static_cast<std::size_t>(i)];
        if (counts[static_cast<std::size_t>(owner)] < 2) continue;
        const double d = (points.row(i) - res.centroids.row(owner)).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far < 0) continue;
      const int owner = assign[static_cast<std::size_t>(far)];
      res.centroids.row(c) = points.row(far);
      sums.row(owner) -= points.row(far);
      --counts[static_cast<std::size_t>(owner)];
      res.centroids.row(owner) = sums.row(owner) / counts[static_cast<std::size_t>(owner)];
      assign[static_cast<std::size_t>(far)] = c;
      counts[static_cast<std::size_t>(c)] = 1;
      sums.row(c) = points.row(far);
    }
  }
  res.inertia = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = 0.0;
    assign[static_cast<std::size_t>(i)] = detail::nearest_row(res.centroids, points.row(i), &d);
    res.inertia += d;
  }
  res.assignments = std::move(assign);
  return res;
}

// ---------------------------------------------------------------------------

struct Codebook {
  int K = 0;
  int D = 0;
  Mat embeddings;                // K x D, the code vectors
  std::vector<double> ema_count;  // K
  Mat ema_sum;                   // K x D
  double gamma = 0.99;
  double eps = 1e-5;
  bool initialized = false;
};

inline Codebook make_codebook(int k, int d, double gamma = 0.99, double eps = 1e-5) {
  if (k < 1 || d < 1) fail<ValidationError>("codebook: K and D must be positive");
  if (!(gamma > 0.0 && gamma <= 1.0)) fail<ValidationError>("codebook: gamma must lie in (0, 1]");
  if (!(eps >= 0.0)) fail<ValidationError>("codebook: eps must be >= 0");
  Codebook cb;
  cb.K = k;
  cb.D = d;
  cb.embeddings = Mat::Zero(k, d);
  cb.ema_count.assign(static_cast<std::size_t>(k), 0.0);
  cb.ema_sum = Mat::Zero(k, d);
  cb.gamma = gamma;
  cb.eps = eps;
  return cb;
}

/// Seeds the codebook with k-means centres of `points`; EMA statistics start
/// from the cluster sizes and sums so that e == ema_sum / ema_count. With
/// restarts > 1 the lowest-inertia run wins (earliest on ties).
inline KMeansResult init_from_kmeans(Codebook& cb, const Mat& points, int max_iters, std::uint64_t seed,
                                     int restarts = 1) {
  if (cb.initialized) fail<ValidationError>("init_from_kmeans: codebook already initialised");
  if (points.cols() != cb.D) fail<ValidationError>("init_from_kmeans: point dimension ", points.cols(), " != D=", cb.D);
  if (points.rows() < cb.K)
    fail<ValidationError>("init_from_kmeans: need at least K=", cb.K, " points, got ", points.rows());
  if (restarts < 1) fail<ValidationError>("init_from_kmeans: restarts must be >= 1");
  KMeansResult km = kmeans(points, cb.K, max_iters, seed);
  for (int r = 1; r < restarts; ++r) {
    KMeansResult other = kmeans(points, cb.K, max_iters, substream(seed, "restart-" + std::to_string(r)));
    if (other.inertia < km.inertia) km = std::move(other);
  }
  cb.embeddings = km.centroids;
  std::fill(cb.ema_count.begin(), cb.ema_count.end(), 0.0);
  cb.ema_sum.setZero();
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int a = km.assignments[static_cast<std::size_t>(i)];
    cb.ema_count[static_cast<std::size_t>(a)] += 1.0;
    cb.ema_sum.row(a) += points.row(i);
  }
  // Codes left empty keep their centroid with a unit pseudo-count.
  for (int k = 0; k < cb.K; ++k)
    if (cb.ema_count[static_cast<std::size_t>(k)] == 0.0) {
      cb.ema_count[static_cast<std::size_t>(k)] = 1.0;
      cb.ema_sum.row(k) = cb.embeddings.row(k);
    }
  cb.initialized = true;
  return km;
}

/// Gaussian random codebook (the "no k-means" ablation); unit pseudo-counts.
inline void init_random(Codebook& cb, std::uint64_t seed, double scale = 1.0) {
  if (cb.initialized) fail<ValidationError>("init_random: codebook already initialised");
  Rng rng(substream(seed, "codebook-random"));
  for (Eigen::Index i = 0; i < cb.embeddings.size(); ++i) cb.embeddings.data()[i] = gaussian(rng, 0.0, scale);
  std::fill(cb.ema_count.begin(), cb.ema_count.end(), 1.0);
  cb.ema_sum = cb.embeddings;
  cb.initialized = true;
}

struct QuantizeResult {
  std::vector<int> indices;
  Mat quantized;                // N x D
  std::vector<double> sq_dist;  // N
};

/// Exact nearest-code search; ties go to the lowest index.
inline QuantizeResult quantize(const Codebook& cb, const Mat& z) {
  if (!cb.initialized) fail<ValidationError>("quantize: codebook not initialised");
  if (z.cols() != cb.D) fail<ValidationError>("quantize: input dimension ", z.cols(), " != D=", cb.D);
  QuantizeResult r;
  r.indices.resize(static_cast<std::size_t>(z.rows()));
  r.sq_dist.resize(static_cast<std::size_t>(z.rows()));
  r.quantized.resize(z.rows(), cb.D);
  for (Eigen::Index n = 0; n < z.rows(); ++n) {
    const int k = detail::nearest_row(cb.embeddings, z.row(n), &r.sq_dist[static_cast<std::size_t>(n)]);
    r.indices[static_cast<std::size_t>(n)] = k;
    r.quantized.row(n) = cb.embeddings.row(k);
  }
  return r;
}

/// One EMA step:
///   count_i <- gamma*count_i + (1-gamma)*n_i
///   sum_i   <- gamma*sum_i   + (1-gamma)*sum_{idx=i} z
///   e_i     <- sum_i / laplace(count_i)
inline void ema_update(Codebook& cb, const Mat& z, std::span<const int> indices) {
  if (!cb.initialized) fail<ValidationError>("ema_update: codebook not initialised");
  if (static_cast<std::size_t>(z.rows()) != indices.size())
    fail<ValidationError>("ema_update: ", z.rows(), " vectors but ", indices.size(), " indices");
  if (z.cols() != cb.D) fail<ValidationError>("ema_update: input dimension mismatch");
  std::vector<double> n(static_cast<std::size_t>(cb.K), 0.0);
  Mat s = Mat::Zero(cb.K, cb.D);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int k = indices[i];
    if (k < 0 || k >= cb.K) fail<ValidationError>("ema_update: index ", k, " out of range");
    n[static_cast<std::size_t>(k)] += 1.0;
    s.row(k) += z.row(static_cast<Eigen::Index>(i));
  }
  double total = 0.0;
  for (int k = 0; k < cb.K; ++k) {
    auto& c = cb.ema_count[static_cast<std::size_t>(k)];
    c = cb.gamma * c + (1.0 - cb.gamma) * n[static_cast<std::size_t>(k)];
    cb.ema_sum.row(k) = cb.gamma * cb.ema_sum.row(k) + (1.0 - cb.gamma) * s.row(k);
    total += c;
  }
  for (int k = 0; k < cb.K; ++k) {
    const double smoothed = (cb.ema_count[static_cast<std::size_t>(k)] + cb.eps) / (total + cb.K * cb.eps) * total;
    if (smoothed > 0.0) cb.embeddings.row(k) = cb.ema_sum.row(k) / smoothed;
  }
}

struct UsageStats {
  std::vector<long> histogram;
  double perplexity = 1.0;
  int active_codes = 0;
};

inline UsageStats usage_stats(std::span<const int> indices, int k) {
  UsageStats u;
  u.histogram.assign(static_cast<std::size_t>(k), 0);
  for (int i : indices) {
    if (i < 0 || i >= k) fail<ValidationError>("usage_stats: index ", i, " outside [0, ", k, ")");
    ++u.histogram[static_cast<std::size_t>(i)];
  }
  const double total = static_cast<double>(indices.size());
  double entropy = 0.0;
  for (long c : u.histogram) {
    if (c == 0) continue;
    ++u.active_codes;
    const double p = static_cast<double>(c) / total;
    entropy -= p * std::log(p);
  }
  u.perplexity = std::exp(entropy);
  return u;
}

// ---------------------------------------------------------------------------
// Code/cluster agreement

namespace detail {

/// Hungarian algorithm on a square cost matrix; returns column for each row.
inline std::vector<int> hungarian_min(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline std::vector<std::vector<long>> contingency(std::span<const int> codes, std::span<const int> clusters, int k,
                                                  int n_clusters) {
  if (codes.size() != clusters.size()) fail<ValidationError>("purity: label count mismatch");
  std::vector<std::vector<long>> t(static_cast<std::size_t>(k), std::vector<long>(static_cast<std::size_t>(n_clusters), 0));
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] < 0 || codes[i] >= k || clusters[i] < 0 || clusters[i] >= n_clusters)
      fail<ValidationError>("purity: label out of range");
    ++t[static_cast<std::size_t>(codes[i])][static_cast<std::size_t>(clusters[i])];
  }
  return t;
}

}  // namespace detail

/// Fraction of words whose code is the one matched to their cluster under the
/// best one-to-one code<->cluster assignment.
inline double bijective_purity(std::span<const int> codes, std::span<const int> clusters, int k, int n_clusters) {
  if (codes.empty()) return 0.0;
  const auto t = detail::contingency(codes, clusters, k, n_clusters);
  const int n = std::max(k, n_clusters);
  std::vector<std::vector<double>> cost(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int a = 0; a < k; ++a)
    for (int c = 0; c < n_clusters; ++c)
      cost[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] = -static_cast<double>(t[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)]);
  const auto match = detail::hungarian_min(cost);
  long hit = 0;
  for (int a = 0; a < k; ++a) {
    const int c = match[static_cast<std::size_t>(a)];
    if (c >= 0 && c < n_clusters) hit += t[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)];
  }
  return static_cast<double>(hit) / static_cast<double>(codes.size());
}

/// Classic clustering purity: each code votes for its majority cluster.
inline double majority_purity(std::span<const int> codes, std::span<const int> clusters, int k, int n_clusters) {
  if (codes.empty()) return 0.0;
  const auto t = detail::contingency(codes, clusters, k, n_clusters);
  long hit = 0;
  for (const auto& row : t) hit += *std::max_element(row.begin(), row.end());
  return static_cast<double>(hit) / static_cast<double>(codes.size());
}

// ---------------------------------------------------------------------------
// Codebook file

inline constexpr char kCodebookMagic[4] = {'L', 'P', 'V', 'Q'};

inline std::string encode_codebook(const Codebook& cb) {
  std::string out(kCodebookMagic, 4);
  io::put_u32(out, 1);
  io::put_u32(out, static_cast<std::uint32_t>(cb.K));
  io::put_u32(out, static_cast<std::uint32_t>(cb.D));
  io::put_f32(out, static_cast<float>(cb.gamma));
  io::put_f32(out, static_cast<float>(cb.eps));
  for (Eigen::Index i = 0; i < cb.embeddings.size(); ++i) io::put_f32(out, static_cast<float>(cb.embeddings.data()[i]));
  for (double c : cb.ema_count) io::put_f32(out, static_cast<float>(c));
  for (Eigen::Index i = 0; i < cb.ema_sum.size(); ++i) io::put_f32(out, static_cast<float>(cb.ema_sum.data()[i]));
  return out;
}

inline void save_codebook(const Codebook& cb, const std::filesystem::path& path) {
  if (!cb.initialized) fail<ValidationError>("save_codebook: codebook not initialised");
  io::write_file(path, encode_codebook(cb));
}

/// Loaded codebooks are always initialised (only initialised ones are saved).
inline Codebook load_codebook(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path), path.string());
  if (r.bytes(4, "magic") != std::string(kCodebookMagic, 4)) fail<FormatError>(path.string(), ": bad magic at offset 0");
  const auto version = r.u32("version");
  if (version != 1) fail<FormatError>(path.string(), ": unsupported version ", version, " at offset 4");
  const auto k = static_cast<int>(r.u32("K"));
  const auto d = static_cast<int>(r.u32("D"));
  const double gamma = r.f32("gamma");
  const double eps = r.f32("eps");
  Codebook cb = make_codebook(k, d, gamma, eps);
  for (Eigen::Index i = 0; i < cb.embeddings.size(); ++i) cb.embeddings.data()[i] = r.f32("codebook");
  for (auto& c : cb.ema_count) c = r.f32("ema_count");
  for (Eigen::Index i = 0; i < cb.ema_sum.size(); ++i) cb.ema_sum.data()[i] = r.f32("ema_sum");
  if (r.remaining() != 0) fail<FormatError>(path.string(), ": trailing bytes at offset ", r.offset());
  cb.initialized = true;
  return cb;
}

}  // namespace lpv
