#pragma once

// Minimal reverse-mode differentiation over dense matrices, enough for the
// convolutional prosody autoencoder and the self-attention LPV predictor.
// A Tape records one forward pass; backward() accumulates into Parameter::grad.

#include "lpv/common.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lpv::ag {

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
};

/// Owns named parameters in insertion order (the order checkpoints use).
class ParameterStore {
 public:
  Parameter& add(std::string name, Mat init) {
    for (const auto& p : params_)
      if (p->name == name) fail("duplicate parameter ", name);
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->grad = Mat::Zero(init.rows(), init.cols());
    p->value = std::move(init);
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter& get(std::string_view name) {
    for (auto& p : params_)
      if (p->name == name) return *p;
    fail("unknown parameter ", name);
  }
  const Parameter& get(std::string_view name) const { return const_cast<ParameterStore*>(this)->get(name); }

  bool contains(std::string_view name) const {
    for (const auto& p : params_)
      if (p->name == name) return true;
    return false;
  }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<const Parameter*> all() const {
    std::vector<const Parameter*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  /// Parameters whose name starts with any of the prefixes.
  std::vector<Parameter*> with_prefix(std::initializer_list<std::string_view> prefixes) {
    std::vector<Parameter*> out;
    for (auto& p : params_)
      for (auto pre : prefixes)
        if (std::string_view(p->name).substr(0, pre.size()) == pre) {
          out.push_back(p.get());
          break;
        }
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.setZero();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

struct Var {
  int id = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat v) { return push(std::move(v), false, nullptr); }

  Var param(Parameter& p) {
    Var v = push(p.value, true, nullptr);
    nodes_[static_cast<std::size_t>(v.id)].param = &p;
    return v;
  }

  const Mat& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  double scalar(Var v) const { return value(v)(0, 0); }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  /// Gradient buffer, allocated (zeroed) on first touch.
  Mat& grad(Var v) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var loss) {
    if (value(loss).size() != 1) fail("backward: loss must be a scalar");
    grad(loss)(0, 0) += 1.0;
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.back) n.back();
      if (n.param) n.param->grad += n.grad;
    }
  }

  // --- elementwise / linear algebra -------------------------------------

  Var matmul(Var a, Var b) {
    Mat out = value(a) * value(b);
    return push(std::move(out), rg(a, b), [this, a, b, o = next_id()] {
      const Mat& g = grad_of(o);
      if (requires_grad(a)) grad(a).noalias() += g * value(b).transpose();
      if (requires_grad(b)) grad(b).noalias() += value(a).transpose() * g;
    });
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Mat out = value(a) + value(b);
    return push(std::move(out), rg(a, b), [this, a, b, o = next_id()] {
      const Mat& g = grad_of(o);
      if (requires_grad(a)) grad(a) += g;
      if (requires_grad(b)) grad(b) += g;
    });
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Mat out = value(a) - value(b);
    return push(std::move(out), rg(a, b), [this, a, b, o = next_id()] {
      const Mat& g = grad_of(o);
      if (requires_grad(a)) grad(a) += g;
      if (requires_grad(b)) grad(b) -= g;
    });
  }

  Var scale(Var a, double s) {
    Mat out = value(a) * s;
    return push(std::move(out), requires_grad(a), [this, a, s, o = next_id()] { grad(a) += grad_of(o) * s; });
  }

  /// a (N x C) + row vector b (1 x C) broadcast over rows.
  Var add_row(Var a, Var b) {
    if (value(b).rows() != 1 || value(b).cols() != value(a).cols()) fail("add_row: shape mismatch");
    Mat out = value(a).rowwise() + value(b).row(0);
    return push(std::move(out), rg(a, b), [this, a, b, o = next_id()] {
      const Mat& g = grad_of(o);
      if (requires_grad(a)) grad(a) += g;
      if (requires_grad(b)) grad(b) += g.colwise().sum();
    });
  }

  Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

  Var relu(Var a) {
    Mat out = value(a).cwiseMax(0.0);
    return push(std::move(out), requires_grad(a), [this, a, o = next_id()] {
      grad(a).array() += grad_of(o).array() * (value(a).array() > 0.0).cast<double>();
    });
  }

  /// Row-wise layer normalisation with learned gain and bias (1 x C each).
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Mat& xv = value(x);
    const auto c = static_cast<double>(xv.cols());
    Mat xhat(xv.rows(), xv.cols());
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const double mu = xv.row(r).mean();
      const double var = (xv.row(r).array() - mu).square().sum() / c;
      inv_std(r) = 1.0 / std::sqrt(var + eps);
      xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
    }
    Mat out = (xhat.array().rowwise() * value(gain).row(0).array()).rowwise() + value(bias).row(0).array();
    return push(std::move(out), rg(x, gain, bias),
                [this, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), c, o = next_id()] {
                  const Mat& g = grad_of(o);
                  if (requires_grad(gain)) grad(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
                  if (requires_grad(bias)) grad(bias) += g.colwise().sum();
                  if (!requires_grad(x)) return;
                  Mat dxhat = g.array().rowwise() * value(gain).row(0).array();
                  auto& gx = grad(x);
                  for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                    const double m1 = dxhat.row(r).sum() / c;
                    const double m2 = dxhat.row(r).dot(xhat.row(r)) / c;
                    gx.row(r).array() += inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                  }
                });
  }

  // --- sequence ops ------------------------------------------------------

  /// Unfolds a T x C sequence into T x (k*C) windows centred on each step,
  /// zero-padded at the edges; a 1-D convolution is then a matmul.
  Var im2col(Var x, int kernel) {
    if (kernel < 1 || kernel % 2 == 0) fail("im2col: kernel must be odd and positive");
    const Mat& xv = value(x);
    const auto t = xv.rows();
    const auto c = xv.cols();
    const int pad = kernel / 2;
    Mat out = Mat::Zero(t, kernel * c);
    for (Eigen::Index i = 0; i < t; ++i)
      for (int j = 0; j < kernel; ++j) {
        const Eigen::Index src = i + j - pad;
        if (src >= 0 && src < t) out.block(i, j * c, 1, c) = xv.row(src);
      }
    return push(std::move(out), requires_grad(x), [this, x, kernel, pad, t, c, o = next_id()] {
      const Mat& g = grad_of(o);
      auto& gx = grad(x);
      for (Eigen::Index i = 0; i < t; ++i)
        for (int j = 0; j < kernel; ++j) {
          const Eigen::Index src = i + j - pad;
          if (src >= 0 && src < t) gx.row(src) += g.block(i, j * c, 1, c);
        }
    });
  }

  /// Mean of rows within each [start, end) segment.
  Var segment_mean(Var x, std::span<const std::pair<int, int>> segments) {
    const Mat& xv = value(x);
    Mat out(static_cast<Eigen::Index>(segments.size()), xv.cols());
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const auto [b, e] = segments[s];
      if (e <= b) fail("segment_mean: empty segment ", s);
      if (b < 0 || e > xv.rows()) fail("segment_mean: segment ", s, " outside [0, ", xv.rows(), ")");
      out.row(static_cast<Eigen::Index>(s)) = xv.middleRows(b, e - b).colwise().sum() / static_cast<double>(e - b);
    }
    std::vector<std::pair<int, int>> segs(segments.begin(), segments.end());
    return push(std::move(out), requires_grad(x), [this, x, segs = std::move(segs), o = next_id()] {
      const Mat& g = grad_of(o);
      auto& gx = grad(x);
      for (std::size_t s = 0; s < segs.size(); ++s) {
        const auto [b, e] = segs[s];
        const RowVec share = g.row(static_cast<Eigen::Index>(s)) / static_cast<double>(e - b);
        for (int f = b; f < e; ++f) gx.row(f) += share;
      }
    });
  }

  /// Repeats row s of x over every frame of segment s.
  Var broadcast_segments(Var x, std::span<const std::pair<int, int>> segments, int n_rows) {
    const Mat& xv = value(x);
    if (static_cast<std::size_t>(xv.rows()) != segments.size()) fail("broadcast_segments: segment count mismatch");
    Mat out = Mat::Zero(n_rows, xv.cols());
    for (std::size_t s = 0; s < segments.size(); ++s)
      for (int f = segments[s].first; f < segments[s].second; ++f) out.row(f) = xv.row(static_cast<Eigen::Index>(s));
    std::vector<std::pair<int, int>> segs(segments.begin(), segments.end());
    return push(std::move(out), requires_grad(x), [this, x, segs = std::move(segs), o = next_id()] {
      const Mat& g = grad_of(o);
      auto& gx = grad(x);
      for (std::size_t s = 0; s < segs.size(); ++s)
        gx.row(static_cast<Eigen::Index>(s)) += g.middleRows(segs[s].first, segs[s].second - segs[s].first).colwise().sum();
    });
  }

  /// Embedding lookup.
  Var gather_rows(Var table, std::span<const int> ids) {
    const Mat& tv = value(table);
    Mat out(static_cast<Eigen::Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= tv.rows()) fail("gather_rows: id ", ids[i], " outside table of ", tv.rows());
      out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return push(std::move(out), requires_grad(table), [this, table, idx = std::move(idx), o = next_id()] {
      const Mat& g = grad_of(o);
      auto& gt = grad(table);
      for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  }

  /// First n rows.
  Var head_rows(Var x, Eigen::Index n) {
    Mat out = value(x).topRows(n);
    return push(std::move(out), requires_grad(x), [this, x, n, o = next_id()] { grad(x).topRows(n) += grad_of(o); });
  }

  /// Multi-head scaled dot-product attention over already-projected Q, K, V
  /// (T x H each). With `causal`, step t attends to steps <= t only.
  Var attention(Var q, Var k, Var v, int heads, bool causal) {
    const Mat& qv = value(q);
    const Mat& kv = value(k);
    const Mat& vv = value(v);
    const auto t = qv.rows();
    const auto h = qv.cols();
    if (heads < 1 || h % heads != 0) fail("attention: hidden size ", h, " not divisible by ", heads, " heads");
    const auto dh = h / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    auto probs = std::make_shared<std::vector<Mat>>();
    Mat out(t, h);
    for (int hd = 0; hd < heads; ++hd) {
      Mat s = qv.middleCols(hd * dh, dh) * kv.middleCols(hd * dh, dh).transpose() * inv_sqrt;
      for (Eigen::Index i = 0; i < t; ++i) {
        const Eigen::Index limit = causal ? i + 1 : t;
        const double mx = s.row(i).head(limit).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j < t; ++j) {
          const double e = j < limit ? std::exp(s(i, j) - mx) : 0.0;
          s(i, j) = e;
          z += e;
        }
        s.row(i) /= z;
      }
      out.middleCols(hd * dh, dh) = s * vv.middleCols(hd * dh, dh);
      probs->push_back(std::move(s));
    }
    return push(std::move(out), rg(q, k, v), [this, q, k, v, heads, dh, inv_sqrt, probs, o = next_id()] {
      const Mat& g = grad_of(o);
      for (int hd = 0; hd < heads; ++hd) {
        const Mat& p = (*probs)[static_cast<std::size_t>(hd)];
        const Mat go = g.middleCols(hd * dh, dh);
        if (requires_grad(v)) grad(v).middleCols(hd * dh, dh).noalias() += p.transpose() * go;
        if (!requires_grad(q) && !requires_grad(k)) continue;
        const Mat dp = go * value(v).middleCols(hd * dh, dh).transpose();
        Mat ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
        ds *= inv_sqrt;
        if (requires_grad(q)) grad(q).middleCols(hd * dh, dh).noalias() += ds * value(k).middleCols(hd * dh, dh);
        if (requires_grad(k)) grad(k).middleCols(hd * dh, dh).noalias() += ds.transpose() * value(q).middleCols(hd * dh, dh);
      }
    });
  }

  // --- losses --------------------------------------------------------------

  /// weight * sum over rows with target >= 0 of -log softmax(logits)[target].
  Var cross_entropy(Var logits, std::span<const int> targets, double weight) {
    const Mat& lv = value(logits);
    if (static_cast<std::size_t>(lv.rows()) != targets.size()) fail("cross_entropy: target count mismatch");
    Mat probs(lv.rows(), lv.cols());
    double loss = 0.0;
    for (Eigen::Index r = 0; r < lv.rows(); ++r) {
      const double mx = lv.row(r).maxCoeff();
      probs.row(r) = (lv.row(r).array() - mx).exp();
      const double z = probs.row(r).sum();
      probs.row(r) /= z;
      const int y = targets[static_cast<std::size_t>(r)];
      if (y < 0) continue;
      if (y >= lv.cols()) fail("cross_entropy: target ", y, " outside ", lv.cols(), " classes");
      loss -= (lv(r, y) - mx) - std::log(z);
    }
    Mat out(1, 1);
    out(0, 0) = weight * loss;
    std::vector<int> ys(targets.begin(), targets.end());
    return push(std::move(out), requires_grad(logits),
                [this, logits, ys = std::move(ys), probs = std::move(probs), weight, o = next_id()] {
                  const double g = grad_of(o)(0, 0) * weight;
                  auto& gl = grad(logits);
                  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                    const int y = ys[static_cast<std::size_t>(r)];
                    if (y < 0) continue;
                    gl.row(r) += g * probs.row(r);
                    gl(r, y) -= g;
                  }
                });
  }

  /// Mean over all entries of (a - b)^2.
  Var mse(Var a, Var b) {
    check_same(a, b, "mse");
    const Mat diff = value(a) - value(b);
    const auto n = static_cast<double>(diff.size());
    Mat out(1, 1);
    out(0, 0) = diff.squaredNorm() / n;
    return push(std::move(out), rg(a, b), [this, a, b, diff, n, o = next_id()] {
      const double g = grad_of(o)(0, 0) * 2.0 / n;
      if (requires_grad(a)) grad(a) += g * diff;
      if (requires_grad(b)) grad(b) -= g * diff;
    });
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void()> back;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  int next_id() const { return static_cast<int>(nodes_.size()); }

  const Mat& grad_of(int id) { return grad(Var{id}); }

  template <typename... Vs>
  bool rg(Vs... vs) const {
    return (requires_grad(vs) || ...);
  }

  void check_same(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      fail(op, ": shape mismatch ", value(a).rows(), "x", value(a).cols(), " vs ", value(b).rows(), "x",
           value(b).cols());
  }

  Var push(Mat value, bool requires_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------

/// Adam with bias correction over a fixed parameter group.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Parameter*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

  /// Rescales the group's gradients so their global L2 norm is at most max_norm.
  double clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (auto* p : params_) sq += p->grad.squaredNorm();
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm)
      for (auto* p : params_) p->grad *= max_norm / norm;
    return norm;
  }

  int steps() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Mat> m_, v_;
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int t_ = 0;
};

/// Fills a matrix with N(0, stddev^2) draws.
inline Mat random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gaussian(rng, 0.0, stddev);
  return m;
}

}  // namespace lpv::ag
