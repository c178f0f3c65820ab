#pragma once

// Dense MLP with exact reverse-mode gradients, a diagonal Gaussian-mixture
// output head, Adam, and the regression losses shared by the RL updates.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "batchrl/common.hpp"

namespace batchrl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { Relu, Tanh, Linear };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Linear: return "linear";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  if (s == "linear") return Activation::Linear;
  throw DataError("unknown activation '" + s + "'");
}

/// Layer widths [d0, ..., dL]; `hidden` applies to every layer but the last,
/// which uses `output`.
struct MlpSpec {
  std::vector<int> widths;
  Activation hidden = Activation::Relu;
  Activation output = Activation::Linear;
  std::uint64_t seed = 0;

  int layers() const { return static_cast<int>(widths.size()) - 1; }
  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }

  Json to_json() const {
    return {{"widths", widths},
            {"hidden", activation_name(hidden)},
            {"output", activation_name(output)},
            {"seed", seed}};
  }

  static MlpSpec from_json(const Json& j) {
    MlpSpec s;
    s.widths = j.at("widths").get<std::vector<int>>();
    s.hidden = parse_activation(j.at("hidden").get<std::string>());
    s.output = parse_activation(j.at("output").get<std::string>());
    s.seed = j.value("seed", std::uint64_t{0});
    return s;
  }

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

struct LayerIndex {
  Eigen::Index weight_offset = 0;
  Eigen::Index bias_offset = 0;
  int in = 0;
  int out = 0;
};

/// Intermediate values of one forward pass. post[0] is the input.
struct ForwardCache {
  std::vector<Matrix> pre;
  std::vector<Matrix> post;
};

namespace nn_detail {

inline void activate(Activation a, const Matrix& z, Matrix& out) {
  switch (a) {
    case Activation::Relu: out = z.cwiseMax(0.0); return;
    case Activation::Tanh: out = z.array().tanh().matrix(); return;
    case Activation::Linear: out = z; return;
  }
}

/// dL/dz given dL/dy, the pre-activation z and the activation y.
inline Matrix activation_backward(Activation a, const Matrix& dy, const Matrix& z, const Matrix& y) {
  switch (a) {
    case Activation::Relu: return (z.array() > 0.0).select(dy, 0.0);
    case Activation::Tanh: return (dy.array() * (1.0 - y.array().square())).matrix();
    case Activation::Linear: return dy;
  }
  return dy;
}

}  // namespace nn_detail

/// Fully connected network over a flat float64 parameter vector. Layer l maps
/// Y = act(X W_l + b_l) with W_l stored column-major as in x out.
class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(MlpSpec spec) : spec_(std::move(spec)) {
    if (spec_.widths.size() < 2) throw DataError("MLP needs at least one layer");
    for (int w : spec_.widths) {
      if (w < 1) throw DataError("MLP layer widths must be >= 1");
    }
    Eigen::Index offset = 0;
    for (int l = 0; l < spec_.layers(); ++l) {
      LayerIndex li;
      li.in = spec_.widths[static_cast<std::size_t>(l)];
      li.out = spec_.widths[static_cast<std::size_t>(l) + 1];
      li.weight_offset = offset;
      offset += static_cast<Eigen::Index>(li.in) * li.out;
      li.bias_offset = offset;
      offset += li.out;
      index_.push_back(li);
    }
    params_ = Vector::Zero(offset);
    initialize(spec_.seed);
  }

  /// Uniform fan-in initialization U(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const auto& li : index_) {
      double bound = 1.0 / std::sqrt(static_cast<double>(li.in));
      Eigen::Index n = static_cast<Eigen::Index>(li.in) * li.out + li.out;
      for (Eigen::Index i = 0; i < n; ++i) params_[li.weight_offset + i] = uniform(rng, -bound, bound);
    }
  }

  const MlpSpec& spec() const { return spec_; }
  const std::vector<LayerIndex>& layout() const { return index_; }
  Vector& params() { return params_; }
  const Vector& params() const { return params_; }
  Eigen::Index size() const { return params_.size(); }

  Eigen::Map<const Matrix> weight(int l) const {
    const auto& li = index_[static_cast<std::size_t>(l)];
    return {params_.data() + li.weight_offset, li.in, li.out};
  }
  Eigen::Map<Matrix> weight(int l) {
    const auto& li = index_[static_cast<std::size_t>(l)];
    return {params_.data() + li.weight_offset, li.in, li.out};
  }
  Eigen::Map<const Eigen::RowVectorXd> bias(int l) const {
    const auto& li = index_[static_cast<std::size_t>(l)];
    return {params_.data() + li.bias_offset, li.out};
  }
  Eigen::Map<Eigen::RowVectorXd> bias(int l) {
    const auto& li = index_[static_cast<std::size_t>(l)];
    return {params_.data() + li.bias_offset, li.out};
  }

  Activation activation(int l) const { return l + 1 == spec_.layers() ? spec_.output : spec_.hidden; }

  Matrix forward(const Matrix& x, ForwardCache* cache = nullptr) const {
    if (x.cols() != spec_.input_dim()) {
      throw DataError("MLP input has " + std::to_string(x.cols()) + " columns, expected " +
                      std::to_string(spec_.input_dim()));
    }
    if (cache != nullptr) {
      cache->pre.assign(static_cast<std::size_t>(spec_.layers()), Matrix());
      cache->post.assign(static_cast<std::size_t>(spec_.layers()) + 1, Matrix());
      cache->post[0] = x;
    }
    Matrix h = x;
    for (int l = 0; l < spec_.layers(); ++l) {
      Matrix z = h * weight(l);
      z.rowwise() += bias(l);
      Matrix y;
      nn_detail::activate(activation(l), z, y);
      if (cache != nullptr) {
        cache->pre[static_cast<std::size_t>(l)] = std::move(z);
        cache->post[static_cast<std::size_t>(l) + 1] = y;
      }
      h = std::move(y);
    }
    return h;
  }

  /// Accumulates dL/dparams into `grad` (resized and zeroed if empty) and
  /// optionally returns dL/dinput.
  void backward(const ForwardCache& cache, const Matrix& dout, Vector& grad,
                Matrix* dinput = nullptr) const {
    if (cache.post.size() != static_cast<std::size_t>(spec_.layers()) + 1) {
      throw DataError("forward cache does not match network topology");
    }
    if (dout.cols() != spec_.output_dim() || dout.rows() != cache.post[0].rows()) {
      throw DataError("upstream gradient shape does not match network output");
    }
    if (grad.size() != params_.size()) grad = Vector::Zero(params_.size());
    Matrix d = dout;
    for (int l = spec_.layers() - 1; l >= 0; --l) {
      auto ul = static_cast<std::size_t>(l);
      Matrix dz = nn_detail::activation_backward(activation(l), d, cache.pre[ul], cache.post[ul + 1]);
      const auto& li = index_[ul];
      Eigen::Map<Matrix> gw(grad.data() + li.weight_offset, li.in, li.out);
      Eigen::Map<Eigen::RowVectorXd> gb(grad.data() + li.bias_offset, li.out);
      gw.noalias() += cache.post[ul].transpose() * dz;
      gb += dz.colwise().sum();
      if (l > 0 || dinput != nullptr) d = dz * weight(l).transpose();
    }
    if (dinput != nullptr) *dinput = std::move(d);
  }

 private:
  MlpSpec spec_;
  std::vector<LayerIndex> index_;
  Vector params_;
};

/// Adam hyperparameters and moment state.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vector m;
  Vector v;
  std::int64_t t = 0;

  AdamState() = default;
  AdamState(Eigen::Index n, double learning_rate) : lr(learning_rate), m(Vector::Zero(n)), v(Vector::Zero(n)) {}

  Json hyper_json() const { return {{"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"t", t}}; }

  void load_hyper(const Json& j) {
    lr = j.at("lr").get<double>();
    beta1 = j.at("beta1").get<double>();
    beta2 = j.at("beta2").get<double>();
    eps = j.at("eps").get<double>();
    t = j.at("t").get<std::int64_t>();
  }
};

/// One bias-corrected Adam update in place.
inline void adam_step(Vector& params, const Vector& grad, AdamState& s) {
  if (s.m.size() != params.size()) {
    s.m = Vector::Zero(params.size());
    s.v = Vector::Zero(params.size());
  }
  if (grad.size() != params.size()) throw DataError("gradient length does not match parameters");
  ++s.t;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    double mhat = s.m[i] / c1;
    double vhat = s.v[i] / c2;
    params[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

/// Rescales `grad` so its L2 norm is at most `max_norm` (no-op when max_norm <= 0).
inline void clip_grad_norm(Vector& grad, double max_norm) {
  if (max_norm <= 0.0) return;
  double n = grad.norm();
  if (n > max_norm) grad *= max_norm / n;
}

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { Mse, Huber };

/// Mean over rows of loss(pred - target); writes dL/dpred if `grad` non-null.
inline double regression_loss(const Vector& pred, const Vector& target, LossKind kind, double delta,
                              Vector* grad) {
  const auto n = static_cast<double>(pred.size());
  if (pred.size() == 0) {
    if (grad != nullptr) grad->resize(0);
    return 0.0;
  }
  std::vector<double> terms(static_cast<std::size_t>(pred.size()));
  if (grad != nullptr) grad->resize(pred.size());
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    double e = pred[i] - target[i];
    double l;
    double g;
    if (kind == LossKind::Mse || std::abs(e) <= delta) {
      l = kind == LossKind::Mse ? e * e : 0.5 * e * e;
      g = kind == LossKind::Mse ? 2.0 * e : e;
    } else {
      l = delta * (std::abs(e) - 0.5 * delta);
      g = delta * (e > 0 ? 1.0 : -1.0);
    }
    terms[static_cast<std::size_t>(i)] = l;
    if (grad != nullptr) (*grad)[i] = g / n;
  }
  return pairwise_sum(terms) / n;
}

// ---------------------------------------------------------------------------
// Gaussian mixture head

constexpr double kLogStdMin = -5.0;
constexpr double kLogStdMax = 5.0;
constexpr double kHalfLog2Pi = 0.91893853320467274178;

/// Number of raw outputs a k-component, d-dimensional diagonal GMM head needs.
inline int gmm_raw_width(int k, int d) { return k * (1 + 2 * d); }

/// Mixture parameters decoded from the raw head layout
/// [k logits | k*d means | k*d log stddevs].
struct GmmHeadOutput {
  Vector logits;     // k
  Matrix means;      // k x d
  Matrix log_stds;   // k x d, unclamped

  static GmmHeadOutput from_raw(const double* raw, int k, int d) {
    GmmHeadOutput h;
    h.logits = Eigen::Map<const Vector>(raw, k);
    h.means = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        raw + k, k, d);
    h.log_stds = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        raw + k + k * d, k, d);
    return h;
  }

  /// Mixture weights softmax(logits).
  Vector weights() const {
    Vector w = (logits.array() - logits.maxCoeff()).exp();
    return w / w.sum();
  }

  /// Mixture mean E[y] per dimension.
  Eigen::RowVectorXd mean() const { return weights().transpose() * means; }
};

inline double log_sum_exp(const double* xs, int n) {
  double m = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) m = std::max(m, xs[i]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(xs[i] - m);
  return m + std::log(s);
}

/// -log sum_k softmax(logits)_k N(y; mu_k, diag sigma_k^2) for one row of the
/// raw head layout. Writes dNLL/draw into `grad` (same layout) if non-null.
inline double gmm_nll_raw(const double* raw, const double* y, int k, int d, double* grad = nullptr) {
  const double* logits = raw;
  const double* means = raw + k;
  const double* log_stds = raw + k + k * d;
  std::vector<double> comp(static_cast<std::size_t>(k));
  double lse_logits = log_sum_exp(logits, k);
  for (int c = 0; c < k; ++c) {
    double lp = logits[c] - lse_logits;
    for (int j = 0; j < d; ++j) {
      double ls = std::clamp(log_stds[c * d + j], kLogStdMin, kLogStdMax);
      double z = (y[j] - means[c * d + j]) * std::exp(-ls);
      lp += -kHalfLog2Pi - ls - 0.5 * z * z;
    }
    comp[static_cast<std::size_t>(c)] = lp;
  }
  double lse = log_sum_exp(comp.data(), k);
  if (grad != nullptr) {
    for (int c = 0; c < k; ++c) {
      double prior = std::exp(logits[c] - lse_logits);
      double resp = std::exp(comp[static_cast<std::size_t>(c)] - lse);
      grad[c] = prior - resp;
      for (int j = 0; j < d; ++j) {
        double raw_ls = log_stds[c * d + j];
        double ls = std::clamp(raw_ls, kLogStdMin, kLogStdMax);
        double inv_var = std::exp(-2.0 * ls);
        double diff = y[j] - means[c * d + j];
        grad[k + c * d + j] = -resp * diff * inv_var;
        bool inside = raw_ls > kLogStdMin && raw_ls < kLogStdMax;
        grad[k + k * d + c * d + j] = inside ? resp * (1.0 - diff * diff * inv_var) : 0.0;
      }
    }
  }
  return -lse;
}

inline double gmm_nll(const GmmHeadOutput& head, const Vector& target) {
  int k = static_cast<int>(head.logits.size());
  int d = static_cast<int>(head.means.cols());
  std::vector<double> raw(static_cast<std::size_t>(gmm_raw_width(k, d)));
  for (int c = 0; c < k; ++c) raw[static_cast<std::size_t>(c)] = head.logits[c];
  for (int c = 0; c < k; ++c) {
    for (int j = 0; j < d; ++j) {
      raw[static_cast<std::size_t>(k + c * d + j)] = head.means(c, j);
      raw[static_cast<std::size_t>(k + k * d + c * d + j)] = head.log_stds(c, j);
    }
  }
  return gmm_nll_raw(raw.data(), target.data(), k, d);
}

/// Per-row NLL over a batch (rows of `raw` and `targets`). When `grad` is
/// non-null it receives d(mean NLL)/draw.
inline Vector gmm_nll_batch(const Matrix& raw, const Matrix& targets, int k, int d, Matrix* grad = nullptr) {
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMajor r = raw;
  RowMajor t = targets;
  RowMajor g;
  if (grad != nullptr) g.resize(r.rows(), r.cols());
  Vector out(r.rows());
  for (Eigen::Index i = 0; i < r.rows(); ++i) {
    out[i] = gmm_nll_raw(r.row(i).data(), t.row(i).data(), k, d,
                         grad != nullptr ? g.row(i).data() : nullptr);
  }
  if (grad != nullptr) *grad = g / static_cast<double>(std::max<Eigen::Index>(1, r.rows()));
  return out;
}

}  // namespace batchrl
