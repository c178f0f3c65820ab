#pragma once

// DQN family (standard, double, dueling, multi-step, SARSA targets) and
// parametric-action DQN over the dense MLP core. Also defines the dense
// transition table every update rule consumes.

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "batchrl/common.hpp"
#include "batchrl/nn.hpp"

namespace batchrl {

/// Preprocessed training data. Rows of one episode are contiguous and in
/// ordinal order.
struct TransitionTable {
  Matrix states;       // N x d_s, normalized
  Matrix next_states;  // N x d_s, zero for terminal rows
  Vector rewards;
  Vector time_diff;
  std::vector<std::uint8_t> terminal;
  std::vector<std::string> mdp_ids;
  std::vector<std::string> state_columns;  // feature owning each state column

  // Discrete actions.
  std::vector<int> actions;
  std::vector<int> next_actions;  // -1 when absent
  Matrix next_mask;               // N x |A|, 1 for possible next actions
  std::vector<std::uint8_t> has_next_mask;

  // Parametric and continuous actions.
  Matrix action_features;       // N x d_a
  Matrix next_action_features;  // N x d_a
  Matrix candidates;            // U x d_a, distinct candidate actions
  std::vector<std::vector<int>> next_candidates;
  std::vector<std::uint8_t> has_next_action;

  // Multi-step targets: y = nstep_return + nstep_discount * bootstrap(row).
  Vector nstep_return;
  Vector nstep_discount;
  std::vector<std::int64_t> bootstrap_row;  // -1: episode ends within n steps

  std::size_t size() const { return static_cast<std::size_t>(rewards.size()); }
};

/// Fills the multi-step fields. Returns are truncated at episode end and
/// carry no off-policy correction.
inline void compute_multistep(TransitionTable& t, int n, double gamma, bool use_time_diff) {
  if (n < 1) throw DataError("multi_step must be >= 1");
  const std::size_t size = t.size();
  t.nstep_return = Vector::Zero(static_cast<Eigen::Index>(size));
  t.nstep_discount = Vector::Zero(static_cast<Eigen::Index>(size));
  t.bootstrap_row.assign(size, -1);
  auto step_discount = [&](std::size_t j) {
    return use_time_diff ? std::pow(gamma, t.time_diff[static_cast<Eigen::Index>(j)]) : gamma;
  };
  for (std::size_t i = 0; i < size; ++i) {
    double ret = 0.0;
    double disc = 1.0;
    std::size_t j = i;
    for (int k = 0; k < n; ++k) {
      j = i + static_cast<std::size_t>(k);
      ret += disc * t.rewards[static_cast<Eigen::Index>(j)];
      disc *= step_discount(j);
      if (t.terminal[j]) break;
      if (k + 1 < n && (j + 1 >= size || t.mdp_ids[j + 1] != t.mdp_ids[i])) {
        throw DataError("episode " + t.mdp_ids[i] + " has a non-terminal last row");
      }
    }
    t.nstep_return[static_cast<Eigen::Index>(i)] = ret;
    if (!t.terminal[j]) {
      t.nstep_discount[static_cast<Eigen::Index>(i)] = disc;
      t.bootstrap_row[i] = static_cast<std::int64_t>(j);
    }
  }
}

/// Q(s, a) = V(s) + A(s, a) - mean_a' A(s, a').
inline Matrix dueling_combine(const Vector& v, const Matrix& a) {
  Matrix q = a;
  Vector mean = a.rowwise().mean();
  for (Eigen::Index r = 0; r < q.rows(); ++r) q.row(r).array() += v[r] - mean[r];
  return q;
}

enum class BootstrapMode { Max, Double, Sarsa };

/// Bellman targets y = r + discount * bootstrap. Rows with discount 0 (or
/// without a bootstrap state) get y = r. `mask` restricts the max to the
/// possible next actions.
inline Vector td_targets(const Vector& returns, const Vector& discounts, const std::vector<std::uint8_t>& bootstrap,
                         const Matrix& q_target_next, const Matrix* q_online_next, const Matrix& mask,
                         const std::vector<int>& next_actions, BootstrapMode mode) {
  Vector y = returns;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (!bootstrap[static_cast<std::size_t>(i)]) continue;
    double value = 0.0;
    if (mode == BootstrapMode::Sarsa) {
      value = q_target_next(i, next_actions[static_cast<std::size_t>(i)]);
    } else {
      const Matrix& chooser = (mode == BootstrapMode::Double) ? *q_online_next : q_target_next;
      Eigen::Index best = -1;
      for (Eigen::Index a = 0; a < chooser.cols(); ++a) {
        if (mask(i, a) <= 0.0) continue;
        if (best < 0 || chooser(i, a) > chooser(i, best)) best = a;
      }
      if (best < 0) throw DataError("no possible next action to bootstrap from");
      value = q_target_next(i, best);
    }
    y[i] += discounts[i] * value;
  }
  return y;
}

struct TargetUpdate {
  int every = 100;   // hard copy period in steps
  double tau = 0.0;  // > 0 switches to polyak averaging every step

  Json to_json() const {
    if (tau > 0.0) return {{"type", "polyak"}, {"tau", tau}};
    return {{"type", "hard"}, {"every", every}};
  }
  static TargetUpdate from_json(const Json& j, TargetUpdate def) {
    if (j.is_null()) return def;
    TargetUpdate t;
    std::string type = j.value("type", std::string("hard"));
    if (type == "polyak") {
      t.tau = j.value("tau", 0.005);
      if (!(t.tau > 0.0 && t.tau <= 1.0)) throw DataError("polyak tau must be in (0, 1]");
    } else if (type == "hard") {
      t.every = j.value("every", 100);
      if (t.every < 1) throw DataError("target update period must be >= 1");
    } else {
      throw DataError("unknown target_update type '" + type + "'");
    }
    return t;
  }
};

inline void polyak_update(Vector& target, const Vector& online, double tau) {
  target = tau * online + (1.0 - tau) * target;
}

struct DqnConfig {
  double gamma = 0.9;
  bool double_q = false;
  bool dueling = false;
  bool sarsa = false;
  int multi_step = 1;
  bool use_time_diff = false;
  TargetUpdate target_update{};
  LossKind loss = LossKind::Mse;
  double huber_delta = 1.0;
  double learning_rate = 1e-3;
  double max_grad_norm = 0.0;
  std::vector<int> hidden{64, 64};
  Activation activation = Activation::Relu;

  Json to_json() const {
    return {{"gamma", gamma},
            {"double_q", double_q},
            {"dueling", dueling},
            {"sarsa", sarsa},
            {"multi_step", multi_step},
            {"use_time_diff", use_time_diff},
            {"target_update", target_update.to_json()},
            {"loss", loss == LossKind::Mse ? "mse" : "huber"},
            {"huber_delta", huber_delta},
            {"learning_rate", learning_rate},
            {"max_grad_norm", max_grad_norm},
            {"hidden", hidden},
            {"activation", activation_name(activation)}};
  }

  static DqnConfig from_json(const Json& j) {
    DqnConfig c;
    c.gamma = j.value("gamma", c.gamma);
    c.double_q = j.value("double_q", c.double_q);
    c.dueling = j.value("dueling", c.dueling);
    c.sarsa = j.value("sarsa", c.sarsa);
    c.multi_step = j.value("multi_step", c.multi_step);
    c.use_time_diff = j.value("use_time_diff", c.use_time_diff);
    c.target_update = TargetUpdate::from_json(j.value("target_update", Json()), c.target_update);
    std::string loss = j.value("loss", std::string("mse"));
    if (loss == "mse") {
      c.loss = LossKind::Mse;
    } else if (loss == "huber") {
      c.loss = LossKind::Huber;
    } else {
      throw DataError("unknown loss '" + loss + "'");
    }
    c.huber_delta = j.value("huber_delta", c.huber_delta);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
    c.hidden = j.value("hidden", c.hidden);
    c.activation = parse_activation(j.value("activation", std::string("relu")));
    if (!(c.gamma > 0.0 && c.gamma <= 1.0)) throw DataError("gamma must be in (0, 1]");
    if (c.multi_step < 1) throw DataError("multi_step must be >= 1");
    return c;
  }

  BootstrapMode bootstrap_mode() const {
    if (sarsa) return BootstrapMode::Sarsa;
    return double_q ? BootstrapMode::Double : BootstrapMode::Max;
  }
};

struct NamedBlock {
  std::string name;
  Vector* data;
};

/// Anything with checkpointable parameters and optimizer state.
class Parametrized {
 public:
  virtual ~Parametrized() = default;
  /// Every mutable parameter and optimizer vector, in a fixed order.
  virtual std::vector<NamedBlock> blocks() = 0;
  virtual std::vector<AdamState*> optimizers() = 0;
  std::int64_t steps = 0;
};

/// Common interface of every trainable algorithm.
class Agent : public Parametrized {
 public:
  virtual std::string algorithm() const = 0;
  /// One gradient update on the rows `batch`; returns the (critic) TD loss.
  virtual double train_step(const TransitionTable& data, std::span<const std::size_t> batch) = 0;
  virtual Json config_json() const = 0;
};

namespace rl_detail {

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

/// Aborts on a non-finite loss, naming the feature with the largest input.
inline void check_finite_loss(double loss, const Matrix& inputs, const std::vector<std::string>& columns) {
  if (std::isfinite(loss)) return;
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  std::string feature = "?";
  if (inputs.size() > 0) {
    inputs.cwiseAbs().maxCoeff(&row, &col);
    if (static_cast<std::size_t>(col) < columns.size()) feature = columns[static_cast<std::size_t>(col)];
  }
  throw NumericalError("training loss became non-finite; largest input activation on feature '" + feature +
                       "' (|x| = " + (inputs.size() > 0 ? std::to_string(std::abs(inputs(row, col))) : "n/a") +
                       "); lower the learning rate or check normalization");
}

inline void ensure_finite_params(const Vector& p) {
  if (!p.allFinite()) throw NumericalError("parameters became non-finite after an update");
}

}  // namespace rl_detail

/// Discrete-action DQN; the network emits one Q per action, or [V, A...]
/// combined by the mean-advantage rule when dueling.
class DqnAgent : public Agent {
 public:
  DqnAgent(DqnConfig cfg, int state_dim, std::vector<std::string> actions, std::uint64_t seed)
      : cfg_(std::move(cfg)), actions_(std::move(actions)) {
    if (actions_.empty()) throw DataError("DQN needs at least one action");
    MlpSpec spec;
    spec.widths.push_back(state_dim);
    for (int h : cfg_.hidden) spec.widths.push_back(h);
    spec.widths.push_back(static_cast<int>(actions_.size()) + (cfg_.dueling ? 1 : 0));
    spec.hidden = cfg_.activation;
    spec.seed = seed;
    online_ = Mlp(spec);
    target_ = online_;
    adam_ = AdamState(online_.size(), cfg_.learning_rate);
  }

  std::string algorithm() const override { return "dqn"; }
  const DqnConfig& config() const { return cfg_; }
  const std::vector<std::string>& actions() const { return actions_; }
  const Mlp& online() const { return online_; }
  Mlp& online() { return online_; }
  const Mlp& target() const { return target_; }
  Mlp& target() { return target_; }
  const AdamState& adam() const { return adam_; }

  Json config_json() const override {
    Json j = cfg_.to_json();
    j["algorithm"] = "dqn";
    return j;
  }

  std::vector<NamedBlock> blocks() override {
    return {{"online", &online_.params()}, {"target", &target_.params()}, {"adam_m", &adam_.m}, {"adam_v", &adam_.v}};
  }
  std::vector<AdamState*> optimizers() override { return {&adam_}; }

  Matrix combine(const Matrix& raw) const {
    if (!cfg_.dueling) return raw;
    return dueling_combine(raw.col(0), raw.rightCols(raw.cols() - 1));
  }

  /// dL/draw given dL/dQ.
  Matrix combine_backward(const Matrix& dq) const {
    if (!cfg_.dueling) return dq;
    Matrix draw(dq.rows(), dq.cols() + 1);
    draw.col(0) = dq.rowwise().sum();
    Vector mean = dq.rowwise().mean();
    draw.rightCols(dq.cols()) = dq.colwise() - mean;
    return draw;
  }

  Matrix q_values(const Matrix& states) const { return combine(online_.forward(states)); }
  Matrix target_q_values(const Matrix& states) const { return combine(target_.forward(states)); }

  /// Bellman targets for the rows `batch`.
  Vector targets(const TransitionTable& d, std::span<const std::size_t> batch) const {
    const auto n = static_cast<Eigen::Index>(batch.size());
    Vector ret(n), disc(n);
    std::vector<std::uint8_t> boot(batch.size(), 0);
    std::vector<std::size_t> rows;
    std::vector<int> next_actions(batch.size(), 0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      std::size_t r = batch[i];
      ret[static_cast<Eigen::Index>(i)] = d.nstep_return[static_cast<Eigen::Index>(r)];
      disc[static_cast<Eigen::Index>(i)] = d.nstep_discount[static_cast<Eigen::Index>(r)];
      std::int64_t b = d.bootstrap_row[r];
      std::size_t src = b >= 0 ? static_cast<std::size_t>(b) : r;
      rows.push_back(src);
      if (b < 0) continue;
      boot[i] = 1;
      if (cfg_.sarsa) {
        if (d.next_actions[src] < 0) throw DataError("SARSA target needs next_action (mdp_id " + d.mdp_ids[src] + ")");
        next_actions[i] = d.next_actions[src];
      } else if (!d.has_next_mask[src]) {
        throw DataError("Q-learning target needs possible_next_actions (mdp_id " + d.mdp_ids[src] + ")");
      }
    }
    Matrix next = rl_detail::gather_rows(d.next_states, rows);
    Matrix mask = rl_detail::gather_rows(d.next_mask, rows);
    Matrix qt = target_q_values(next);
    Matrix qo;
    if (cfg_.double_q && !cfg_.sarsa) qo = q_values(next);
    try {
      return td_targets(ret, disc, boot, qt, cfg_.double_q ? &qo : nullptr, mask, next_actions, cfg_.bootstrap_mode());
    } catch (const DataError& e) {
      for (std::size_t i = 0; i < batch.size(); ++i) {
        if (boot[i] && mask.row(static_cast<Eigen::Index>(i)).sum() <= 0.0) {
          throw DataError(std::string(e.what()) + " (mdp_id " + d.mdp_ids[rows[i]] + ")");
        }
      }
      throw;
    }
  }

  double train_step(const TransitionTable& d, std::span<const std::size_t> batch) override {
    Vector y = targets(d, batch);
    Matrix x = rl_detail::gather_rows(d.states, batch);
    ForwardCache cache;
    Matrix q = combine(online_.forward(x, &cache));
    Vector pred(q.rows());
    for (Eigen::Index i = 0; i < q.rows(); ++i) pred[i] = q(i, d.actions[batch[static_cast<std::size_t>(i)]]);
    Vector dpred;
    double loss = regression_loss(pred, y, cfg_.loss, cfg_.huber_delta, &dpred);
    rl_detail::check_finite_loss(loss, x, d.state_columns);
    Matrix dq = Matrix::Zero(q.rows(), q.cols());
    for (Eigen::Index i = 0; i < q.rows(); ++i) dq(i, d.actions[batch[static_cast<std::size_t>(i)]]) = dpred[i];
    Vector grad;
    online_.backward(cache, combine_backward(dq), grad);
    clip_grad_norm(grad, cfg_.max_grad_norm);
    adam_step(online_.params(), grad, adam_);
    rl_detail::ensure_finite_params(online_.params());
    ++steps;
    if (cfg_.target_update.tau > 0.0) {
      polyak_update(target_.params(), online_.params(), cfg_.target_update.tau);
    } else if (steps % cfg_.target_update.every == 0) {
      target_.params() = online_.params();
    }
    return loss;
  }

 private:
  DqnConfig cfg_;
  std::vector<std::string> actions_;
  Mlp online_;
  Mlp target_;
  AdamState adam_;
};

/// Scores concatenated (state, action-features) pairs with a scalar head.
class ParametricDqnAgent : public Agent {
 public:
  ParametricDqnAgent(DqnConfig cfg, int state_dim, int action_dim, std::uint64_t seed)
      : cfg_(std::move(cfg)), state_dim_(state_dim), action_dim_(action_dim) {
    if (cfg_.dueling) throw DataError("dueling is not available for parametric DQN");
    MlpSpec spec;
    spec.widths.push_back(state_dim + action_dim);
    for (int h : cfg_.hidden) spec.widths.push_back(h);
    spec.widths.push_back(1);
    spec.hidden = cfg_.activation;
    spec.seed = seed;
    online_ = Mlp(spec);
    target_ = online_;
    adam_ = AdamState(online_.size(), cfg_.learning_rate);
  }

  std::string algorithm() const override { return "parametric_dqn"; }
  const DqnConfig& config() const { return cfg_; }
  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }
  const Mlp& online() const { return online_; }
  Mlp& online() { return online_; }

  Json config_json() const override {
    Json j = cfg_.to_json();
    j["algorithm"] = "parametric_dqn";
    return j;
  }

  std::vector<NamedBlock> blocks() override {
    return {{"online", &online_.params()}, {"target", &target_.params()}, {"adam_m", &adam_.m}, {"adam_v", &adam_.v}};
  }
  std::vector<AdamState*> optimizers() override { return {&adam_}; }

  /// One Q value per candidate action for a single state.
  Vector parametric_q(const Eigen::RowVectorXd& state, const Matrix& candidates, bool use_target = false) const {
    if (candidates.rows() == 0) throw DataError("parametric Q needs at least one candidate action");
    Matrix x(candidates.rows(), state_dim_ + action_dim_);
    x.leftCols(state_dim_) = state.replicate(candidates.rows(), 1);
    x.rightCols(action_dim_) = candidates;
    return (use_target ? target_ : online_).forward(x).col(0);
  }

  Vector targets(const TransitionTable& d, std::span<const std::size_t> batch) const {
    Vector y(static_cast<Eigen::Index>(batch.size()));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      std::size_t r = batch[i];
      y[static_cast<Eigen::Index>(i)] = d.nstep_return[static_cast<Eigen::Index>(r)];
      std::int64_t b = d.bootstrap_row[r];
      if (b < 0) continue;
      auto src = static_cast<std::size_t>(b);
      Eigen::RowVectorXd next = d.next_states.row(static_cast<Eigen::Index>(src));
      double value = 0.0;
      if (cfg_.sarsa) {
        if (!d.has_next_action[src]) throw DataError("SARSA target needs next_action (mdp_id " + d.mdp_ids[src] + ")");
        value = parametric_q(next, d.next_action_features.row(static_cast<Eigen::Index>(src)), true)[0];
      } else {
        const auto& cand = d.next_candidates[src];
        if (cand.empty()) {
          throw DataError("Q-learning target needs possible_next_actions (mdp_id " + d.mdp_ids[src] + ")");
        }
        Matrix c(static_cast<Eigen::Index>(cand.size()), action_dim_);
        for (std::size_t k = 0; k < cand.size(); ++k) c.row(static_cast<Eigen::Index>(k)) = d.candidates.row(cand[k]);
        Vector qt = parametric_q(next, c, true);
        Eigen::Index best = 0;
        if (cfg_.double_q) {
          parametric_q(next, c, false).maxCoeff(&best);
        } else {
          qt.maxCoeff(&best);
        }
        value = qt[best];
      }
      y[static_cast<Eigen::Index>(i)] += d.nstep_discount[static_cast<Eigen::Index>(r)] * value;
    }
    return y;
  }

  double train_step(const TransitionTable& d, std::span<const std::size_t> batch) override {
    Vector y = targets(d, batch);
    Matrix x(static_cast<Eigen::Index>(batch.size()), state_dim_ + action_dim_);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)).head(state_dim_) = d.states.row(static_cast<Eigen::Index>(batch[i]));
      x.row(static_cast<Eigen::Index>(i)).tail(action_dim_) = d.action_features.row(static_cast<Eigen::Index>(batch[i]));
    }
    ForwardCache cache;
    Vector pred = online_.forward(x, &cache).col(0);
    Vector dpred;
    double loss = regression_loss(pred, y, cfg_.loss, cfg_.huber_delta, &dpred);
    std::vector<std::string> cols = d.state_columns;
    for (int k = 0; k < action_dim_; ++k) cols.push_back("action[" + std::to_string(k) + "]");
    rl_detail::check_finite_loss(loss, x, cols);
    Vector grad;
    online_.backward(cache, Matrix(dpred), grad);
    clip_grad_norm(grad, cfg_.max_grad_norm);
    adam_step(online_.params(), grad, adam_);
    rl_detail::ensure_finite_params(online_.params());
    ++steps;
    if (cfg_.target_update.tau > 0.0) {
      polyak_update(target_.params(), online_.params(), cfg_.target_update.tau);
    } else if (steps % cfg_.target_update.every == 0) {
      target_.params() = online_.params();
    }
    return loss;
  }

 private:
  DqnConfig cfg_;
  int state_dim_;
  int action_dim_;
  Mlp online_;
  Mlp target_;
  AdamState adam_;
};

}  // namespace batchrl
