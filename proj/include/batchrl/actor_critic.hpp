#pragma once

// Continuous-action actor-critic updates: DDPG and SAC with twin critics and
// a tanh-squashed Gaussian actor. Actions live in [-1, 1]^d.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "batchrl/common.hpp"
#include "batchrl/nn.hpp"
#include "batchrl/rl.hpp"

namespace batchrl {

struct ActorCriticConfig {
  double gamma = 0.99;
  double tau = 0.005;
  double actor_lr = 1e-3;
  double critic_lr = 1e-3;
  double alpha = 0.2;  // SAC temperature, fixed
  double max_grad_norm = 0.0;
  std::vector<int> hidden{64, 64};
  Activation activation = Activation::Relu;

  Json to_json() const {
    return {{"gamma", gamma},   {"tau", tau},         {"actor_lr", actor_lr},
            {"critic_lr", critic_lr}, {"alpha", alpha}, {"max_grad_norm", max_grad_norm},
            {"hidden", hidden}, {"activation", activation_name(activation)}};
  }

  static ActorCriticConfig from_json(const Json& j) {
    ActorCriticConfig c;
    c.gamma = j.value("gamma", c.gamma);
    c.tau = j.value("tau", c.tau);
    double lr = j.value("learning_rate", -1.0);
    if (lr > 0.0) c.actor_lr = c.critic_lr = lr;
    c.actor_lr = j.value("actor_lr", c.actor_lr);
    c.critic_lr = j.value("critic_lr", c.critic_lr);
    c.alpha = j.value("alpha", c.alpha);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
    c.hidden = j.value("hidden", c.hidden);
    c.activation = parse_activation(j.value("activation", std::string("relu")));
    if (!(c.gamma > 0.0 && c.gamma <= 1.0)) throw DataError("gamma must be in (0, 1]");
    if (!(c.tau > 0.0 && c.tau <= 1.0)) throw DataError("tau must be in (0, 1]");
    if (c.alpha < 0.0) throw DataError("alpha must be >= 0");
    return c;
  }
};

namespace ac_detail {

inline MlpSpec make_spec(int in, const std::vector<int>& hidden, int out, Activation act, Activation out_act,
                         std::uint64_t seed) {
  MlpSpec s;
  s.widths.push_back(in);
  for (int h : hidden) s.widths.push_back(h);
  s.widths.push_back(out);
  s.hidden = act;
  s.output = out_act;
  s.seed = seed;
  return s;
}

inline Matrix concat(const Matrix& a, const Matrix& b) {
  Matrix x(a.rows(), a.cols() + b.cols());
  x << a, b;
  return x;
}

inline Matrix clamp_actions(const Matrix& a) { return a.cwiseMax(-1.0).cwiseMin(1.0); }

/// One-step critic targets from the precomputed n-step fields.
inline Vector bootstrap_targets(const TransitionTable& d, std::span<const std::size_t> batch, const Vector& next_value) {
  Vector y(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto r = static_cast<Eigen::Index>(batch[i]);
    y[static_cast<Eigen::Index>(i)] = d.nstep_return[r];
    if (d.bootstrap_row[batch[i]] >= 0) y[static_cast<Eigen::Index>(i)] += d.nstep_discount[r] * next_value[static_cast<Eigen::Index>(i)];
  }
  return y;
}

/// States at which each row bootstraps (the row itself when it does not).
inline Matrix bootstrap_states(const TransitionTable& d, std::span<const std::size_t> batch) {
  Matrix out(static_cast<Eigen::Index>(batch.size()), d.next_states.cols());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::int64_t b = d.bootstrap_row[batch[i]];
    out.row(static_cast<Eigen::Index>(i)) = d.next_states.row(b >= 0 ? b : static_cast<Eigen::Index>(batch[i]));
  }
  return out;
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

/// log(1 - tanh(u)^2), stable for large |u|.
inline double log1m_tanh2(double u) { return 2.0 * (std::log(2.0) - u - softplus(-2.0 * u)); }

}  // namespace ac_detail

/// Critic fit shared by DDPG and SAC: regresses Q(s, a) toward y and applies
/// one Adam step. Returns the MSE.
inline double critic_update(Mlp& critic, AdamState& opt, const Matrix& sa, const Vector& y, double max_grad_norm,
                            const std::vector<std::string>& columns) {
  ForwardCache cache;
  Vector pred = critic.forward(sa, &cache).col(0);
  Vector dpred;
  double loss = regression_loss(pred, y, LossKind::Mse, 1.0, &dpred);
  rl_detail::check_finite_loss(loss, sa, columns);
  Vector grad;
  critic.backward(cache, Matrix(dpred), grad);
  clip_grad_norm(grad, max_grad_norm);
  adam_step(critic.params(), grad, opt);
  rl_detail::ensure_finite_params(critic.params());
  return loss;
}

class DdpgAgent : public Agent {
 public:
  DdpgAgent(ActorCriticConfig cfg, int state_dim, int action_dim, std::uint64_t seed)
      : cfg_(std::move(cfg)), state_dim_(state_dim), action_dim_(action_dim) {
    actor_ = Mlp(ac_detail::make_spec(state_dim, cfg_.hidden, action_dim, cfg_.activation, Activation::Tanh, seed));
    critic_ = Mlp(ac_detail::make_spec(state_dim + action_dim, cfg_.hidden, 1, cfg_.activation, Activation::Linear,
                                       derive_seed(seed, 1)));
    actor_target_ = actor_;
    critic_target_ = critic_;
    actor_opt_ = AdamState(actor_.size(), cfg_.actor_lr);
    critic_opt_ = AdamState(critic_.size(), cfg_.critic_lr);
  }

  std::string algorithm() const override { return "ddpg"; }
  Json config_json() const override {
    Json j = cfg_.to_json();
    j["algorithm"] = "ddpg";
    return j;
  }
  std::vector<NamedBlock> blocks() override {
    return {{"actor", &actor_.params()},        {"critic", &critic_.params()},
            {"actor_target", &actor_target_.params()}, {"critic_target", &critic_target_.params()},
            {"actor_adam_m", &actor_opt_.m},    {"actor_adam_v", &actor_opt_.v},
            {"critic_adam_m", &critic_opt_.m},  {"critic_adam_v", &critic_opt_.v}};
  }
  std::vector<AdamState*> optimizers() override { return {&actor_opt_, &critic_opt_}; }

  const Mlp& actor() const { return actor_; }
  Mlp& actor() { return actor_; }
  const Mlp& critic() const { return critic_; }
  Mlp& critic() { return critic_; }
  const Mlp& critic_target() const { return critic_target_; }
  Mlp& actor_target() { return actor_target_; }
  Mlp& critic_target() { return critic_target_; }
  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }

  Matrix act(const Matrix& states) const { return actor_.forward(states); }

  Vector critic_targets(const TransitionTable& d, std::span<const std::size_t> batch) const {
    Matrix next = ac_detail::bootstrap_states(d, batch);
    Vector q_next = critic_target_.forward(ac_detail::concat(next, actor_target_.forward(next))).col(0);
    return ac_detail::bootstrap_targets(d, batch, q_next);
  }

  /// Mean Q(s, mu(s)) and its gradient with respect to the actor parameters.
  double actor_objective(const Matrix& states, Vector* grad) const {
    ForwardCache acache;
    Matrix a = actor_.forward(states, &acache);
    ForwardCache ccache;
    Matrix q = critic_.forward(ac_detail::concat(states, a), &ccache);
    double objective = q.mean();
    if (grad != nullptr) {
      Vector unused;
      Matrix dinput;
      critic_.backward(ccache, Matrix::Constant(q.rows(), 1, 1.0 / static_cast<double>(q.rows())), unused, &dinput);
      actor_.backward(acache, dinput.rightCols(action_dim_), *grad);
    }
    return objective;
  }

  double train_step(const TransitionTable& d, std::span<const std::size_t> batch) override {
    Matrix s = rl_detail::gather_rows(d.states, batch);
    Matrix a = ac_detail::clamp_actions(rl_detail::gather_rows(d.action_features, batch));
    Vector y = critic_targets(d, batch);
    std::vector<std::string> cols = d.state_columns;
    for (int k = 0; k < action_dim_; ++k) cols.push_back("action[" + std::to_string(k) + "]");
    double loss = critic_update(critic_, critic_opt_, ac_detail::concat(s, a), y, cfg_.max_grad_norm, cols);

    Vector grad;
    last_actor_objective = actor_objective(s, &grad);
    grad = -grad;  // ascend Q
    clip_grad_norm(grad, cfg_.max_grad_norm);
    adam_step(actor_.params(), grad, actor_opt_);
    rl_detail::ensure_finite_params(actor_.params());

    polyak_update(actor_target_.params(), actor_.params(), cfg_.tau);
    polyak_update(critic_target_.params(), critic_.params(), cfg_.tau);
    ++steps;
    return loss;
  }

  double last_actor_objective = 0.0;

 private:
  ActorCriticConfig cfg_;
  int state_dim_;
  int action_dim_;
  Mlp actor_, critic_, actor_target_, critic_target_;
  AdamState actor_opt_, critic_opt_;
};

/// Soft actor-critic with fixed temperature. The actor emits [mu | log_std]
/// of a Gaussian in pre-squash space; actions are tanh(u).
class SacAgent : public Agent {
 public:
  static constexpr double kLogStdMin = -5.0;
  static constexpr double kLogStdMax = 2.0;

  SacAgent(ActorCriticConfig cfg, int state_dim, int action_dim, std::uint64_t seed)
      : cfg_(std::move(cfg)), state_dim_(state_dim), action_dim_(action_dim), seed_(seed) {
    actor_ = Mlp(ac_detail::make_spec(state_dim, cfg_.hidden, 2 * action_dim, cfg_.activation, Activation::Linear, seed));
    for (int i = 0; i < 2; ++i) {
      critics_[i] = Mlp(ac_detail::make_spec(state_dim + action_dim, cfg_.hidden, 1, cfg_.activation,
                                             Activation::Linear, derive_seed(seed, 1 + static_cast<std::uint64_t>(i))));
      targets_[i] = critics_[i];
      critic_opt_[i] = AdamState(critics_[i].size(), cfg_.critic_lr);
    }
    actor_opt_ = AdamState(actor_.size(), cfg_.actor_lr);
  }

  std::string algorithm() const override { return "sac"; }
  Json config_json() const override {
    Json j = cfg_.to_json();
    j["algorithm"] = "sac";
    return j;
  }
  std::vector<NamedBlock> blocks() override {
    return {{"actor", &actor_.params()},           {"critic1", &critics_[0].params()},
            {"critic2", &critics_[1].params()},    {"critic1_target", &targets_[0].params()},
            {"critic2_target", &targets_[1].params()}, {"actor_adam_m", &actor_opt_.m},
            {"actor_adam_v", &actor_opt_.v},       {"critic1_adam_m", &critic_opt_[0].m},
            {"critic1_adam_v", &critic_opt_[0].v}, {"critic2_adam_m", &critic_opt_[1].m},
            {"critic2_adam_v", &critic_opt_[1].v}};
  }
  std::vector<AdamState*> optimizers() override { return {&actor_opt_, &critic_opt_[0], &critic_opt_[1]}; }

  const Mlp& actor() const { return actor_; }
  Mlp& actor() { return actor_; }
  const Mlp& critic(int i) const { return critics_[i]; }
  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }
  double alpha() const { return cfg_.alpha; }

  /// log density of a = tanh(u), u ~ N(mu, exp(log_std)^2), in one dimension.
  static double squashed_log_prob(double mu, double log_std, double a) {
    double u = std::atanh(a);
    double z = (u - mu) * std::exp(-log_std);
    return -0.5 * z * z - log_std - kHalfLog2Pi - ac_detail::log1m_tanh2(u);
  }

  struct Sample {
    Matrix actions;   // N x d
    Vector log_prob;  // N
    Matrix u, sigma, log_std;
    std::vector<std::uint8_t> inside;  // log_std within bounds, row-major N*d
  };

  Sample sample(const Matrix& raw, const Matrix& eps) const {
    Sample s;
    const auto n = raw.rows();
    s.actions.resize(n, action_dim_);
    s.u.resize(n, action_dim_);
    s.sigma.resize(n, action_dim_);
    s.log_std.resize(n, action_dim_);
    s.log_prob = Vector::Zero(n);
    s.inside.resize(static_cast<std::size_t>(n * action_dim_));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int j = 0; j < action_dim_; ++j) {
        double mu = raw(i, j);
        double ls_raw = raw(i, action_dim_ + j);
        double ls = std::clamp(ls_raw, kLogStdMin, kLogStdMax);
        double sigma = std::exp(ls);
        double e = eps(i, j);
        double u = mu + sigma * e;
        s.u(i, j) = u;
        s.sigma(i, j) = sigma;
        s.log_std(i, j) = ls;
        s.actions(i, j) = std::tanh(u);
        s.inside[static_cast<std::size_t>(i * action_dim_ + j)] = ls_raw > kLogStdMin && ls_raw < kLogStdMax;
        s.log_prob[i] += -0.5 * e * e - ls - kHalfLog2Pi - ac_detail::log1m_tanh2(u);
      }
    }
    return s;
  }

  /// Deterministic serving action tanh(mu).
  Matrix act(const Matrix& states) const {
    return actor_.forward(states).leftCols(action_dim_).array().tanh().matrix();
  }

  Matrix noise(std::size_t rows, std::uint64_t stream) const {
    std::mt19937_64 rng(derive_seed(seed_, static_cast<std::uint64_t>(steps), stream));
    Matrix e(static_cast<Eigen::Index>(rows), action_dim_);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = standard_normal(rng);
    return e;
  }

  /// y = r + discount * (min_i Q_target_i(s', a') - alpha log pi(a'|s')).
  Vector critic_targets(const TransitionTable& d, std::span<const std::size_t> batch, const Matrix& eps) const {
    Matrix next = ac_detail::bootstrap_states(d, batch);
    Sample s = sample(actor_.forward(next), eps);
    Matrix sa = ac_detail::concat(next, s.actions);
    Vector q1 = targets_[0].forward(sa).col(0);
    Vector q2 = targets_[1].forward(sa).col(0);
    Vector soft = q1.cwiseMin(q2) - cfg_.alpha * s.log_prob;
    return ac_detail::bootstrap_targets(d, batch, soft);
  }

  /// Mean of alpha log pi(a|s) - min_i Q_i(s, a) with reparameterized a, and
  /// its gradient with respect to the actor parameters for fixed noise.
  double actor_loss(const Matrix& states, const Matrix& eps, Vector* grad) const {
    ForwardCache acache;
    Matrix raw = actor_.forward(states, &acache);
    Sample s = sample(raw, eps);
    Matrix sa = ac_detail::concat(states, s.actions);
    ForwardCache c1, c2;
    Vector q1 = critics_[0].forward(sa, &c1).col(0);
    Vector q2 = critics_[1].forward(sa, &c2).col(0);
    const auto n = states.rows();
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> terms(static_cast<std::size_t>(n));
    Matrix up1 = Matrix::Zero(n, 1);
    Matrix up2 = Matrix::Zero(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      bool first = q1[i] <= q2[i];
      terms[static_cast<std::size_t>(i)] = cfg_.alpha * s.log_prob[i] - (first ? q1[i] : q2[i]);
      (first ? up1 : up2)(i, 0) = 1.0;
    }
    double loss = pairwise_sum(terms) * inv_n;
    if (grad != nullptr) {
      Vector unused;
      Matrix d1, d2;
      critics_[0].backward(c1, up1, unused, &d1);
      unused.resize(0);
      critics_[1].backward(c2, up2, unused, &d2);
      Matrix dq_da = (d1 + d2).rightCols(action_dim_);
      Matrix draw = Matrix::Zero(n, 2 * action_dim_);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < action_dim_; ++j) {
          double t = std::tanh(s.u(i, j));
          double a = s.actions(i, j);
          double dqa = dq_da(i, j) * (1.0 - a * a);
          double se = s.sigma(i, j) * eps(i, j);
          draw(i, j) = (cfg_.alpha * 2.0 * t - dqa) * inv_n;
          bool inside = s.inside[static_cast<std::size_t>(i * action_dim_ + j)];
          draw(i, action_dim_ + j) = inside ? (cfg_.alpha * (-1.0 + 2.0 * t * se) - dqa * se) * inv_n : 0.0;
        }
      }
      actor_.backward(acache, draw, *grad);
    }
    return loss;
  }

  double train_step(const TransitionTable& d, std::span<const std::size_t> batch) override {
    Matrix s = rl_detail::gather_rows(d.states, batch);
    Matrix a = ac_detail::clamp_actions(rl_detail::gather_rows(d.action_features, batch));
    Vector y = critic_targets(d, batch, noise(batch.size(), 0));
    std::vector<std::string> cols = d.state_columns;
    for (int k = 0; k < action_dim_; ++k) cols.push_back("action[" + std::to_string(k) + "]");
    Matrix sa = ac_detail::concat(s, a);
    double loss = 0.0;
    for (int i = 0; i < 2; ++i) loss += critic_update(critics_[i], critic_opt_[i], sa, y, cfg_.max_grad_norm, cols);
    loss *= 0.5;

    Vector grad;
    last_actor_loss = actor_loss(s, noise(batch.size(), 1), &grad);
    clip_grad_norm(grad, cfg_.max_grad_norm);
    adam_step(actor_.params(), grad, actor_opt_);
    rl_detail::ensure_finite_params(actor_.params());
    for (int i = 0; i < 2; ++i) polyak_update(targets_[i].params(), critics_[i].params(), cfg_.tau);
    ++steps;
    return loss;
  }

  double last_actor_loss = 0.0;

 private:
  ActorCriticConfig cfg_;
  int state_dim_;
  int action_dim_;
  std::uint64_t seed_;
  Mlp actor_;
  Mlp critics_[2];
  Mlp targets_[2];
  AdamState actor_opt_;
  AdamState critic_opt_[2];
};

}  // namespace batchrl
