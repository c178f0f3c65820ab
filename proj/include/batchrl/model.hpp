#pragma once

// A trained model bundle: the algorithm's networks, the normalization specs
// they were trained with, the action space, and the CPE evaluation
// networks. Round-trips through a checkpoint.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "batchrl/actor_critic.hpp"
#include "batchrl/checkpoint.hpp"
#include "batchrl/dataset.hpp"
#include "batchrl/policy.hpp"
#include "batchrl/rl.hpp"

namespace batchrl {

enum class Algorithm { Dqn, ParametricDqn, Ddpg, Sac };

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "dqn") return Algorithm::Dqn;
  if (s == "parametric_dqn") return Algorithm::ParametricDqn;
  if (s == "ddpg") return Algorithm::Ddpg;
  if (s == "sac") return Algorithm::Sac;
  throw DataError("unknown algorithm '" + s + "' (expected dqn|parametric_dqn|ddpg|sac)");
}

inline const char* algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::Dqn: return "dqn";
    case Algorithm::ParametricDqn: return "parametric_dqn";
    case Algorithm::Ddpg: return "ddpg";
    case Algorithm::Sac: return "sac";
  }
  return "dqn";
}

/// Expected-SARSA evaluation network: one Q head per (series, action),
/// bootstrapping on the target policy's distribution at the next state.
/// With gamma 0 it is a per-action reward model.
class PolicyEvaluator : public Parametrized {
 public:
  PolicyEvaluator(int state_dim, int num_actions, int num_series, double gamma, const std::vector<int>& hidden,
                  double learning_rate, TargetUpdate target_update, std::uint64_t seed)
      : num_actions_(num_actions), num_series_(num_series), gamma_(gamma), target_update_(target_update) {
    MlpSpec spec;
    spec.widths.push_back(state_dim);
    for (int h : hidden) spec.widths.push_back(h);
    spec.widths.push_back(num_actions * num_series);
    spec.seed = seed;
    online_ = Mlp(spec);
    target_ = online_;
    adam_ = AdamState(online_.size(), learning_rate);
  }

  std::vector<NamedBlock> blocks() override {
    return {{"online", &online_.params()}, {"target", &target_.params()}, {"adam_m", &adam_.m}, {"adam_v", &adam_.v}};
  }
  std::vector<AdamState*> optimizers() override { return {&adam_}; }

  int num_actions() const { return num_actions_; }
  int num_series() const { return num_series_; }
  double gamma() const { return gamma_; }
  const Mlp& online() const { return online_; }

  /// N x (series * actions); column s * |A| + a.
  Matrix q(const Matrix& states) const { return online_.forward(states); }

  /// `next_probs` holds the target distribution at each row's next state.
  double update(const TransitionTable& d, const Matrix& series_rewards, std::span<const std::size_t> batch,
                const Matrix& next_probs) {
    const auto n = static_cast<Eigen::Index>(batch.size());
    Matrix x = rl_detail::gather_rows(d.states, batch);
    Matrix next = rl_detail::gather_rows(d.next_states, batch);
    Matrix qt = gamma_ > 0.0 ? target_.forward(next) : Matrix::Zero(n, num_actions_ * num_series_);
    ForwardCache cache;
    Matrix out = online_.forward(x, &cache);
    Vector pred(n * num_series_), y(n * num_series_);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto r = static_cast<Eigen::Index>(batch[static_cast<std::size_t>(i)]);
      int a = d.actions[static_cast<std::size_t>(r)];
      bool boot = gamma_ > 0.0 && !d.terminal[static_cast<std::size_t>(r)];
      for (int s = 0; s < num_series_; ++s) {
        Eigen::Index k = i * num_series_ + s;
        pred[k] = out(i, s * num_actions_ + a);
        double target = series_rewards(r, s);
        if (boot) {
          double v = 0.0;
          for (int b = 0; b < num_actions_; ++b) v += next_probs(i, b) * qt(i, s * num_actions_ + b);
          target += gamma_ * v;
        }
        y[k] = target;
      }
    }
    Vector dpred;
    double loss = regression_loss(pred, y, LossKind::Mse, 1.0, &dpred);
    rl_detail::check_finite_loss(loss, x, d.state_columns);
    Matrix dout = Matrix::Zero(n, out.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      int a = d.actions[batch[static_cast<std::size_t>(i)]];
      for (int s = 0; s < num_series_; ++s) dout(i, s * num_actions_ + a) = dpred[i * num_series_ + s];
    }
    Vector grad;
    online_.backward(cache, dout, grad);
    adam_step(online_.params(), grad, adam_);
    rl_detail::ensure_finite_params(online_.params());
    ++steps;
    if (target_update_.tau > 0.0) {
      polyak_update(target_.params(), online_.params(), target_update_.tau);
    } else if (steps % target_update_.every == 0) {
      target_.params() = online_.params();
    }
    return loss;
  }

 private:
  int num_actions_;
  int num_series_;
  double gamma_;
  TargetUpdate target_update_;
  Mlp online_;
  Mlp target_;
  AdamState adam_;
};

/// Target-policy distribution over all actions; actions with mask 0 get 0.
inline std::vector<double> masked_propensities(const Eigen::RowVectorXd& q, const Eigen::RowVectorXd* mask,
                                               const PolicyMode& mode) {
  std::vector<double> vals;
  std::vector<Eigen::Index> idx;
  for (Eigen::Index a = 0; a < q.size(); ++a) {
    if (mask != nullptr && (*mask)[a] <= 0.0) continue;
    vals.push_back(q[a]);
    idx.push_back(a);
  }
  std::vector<double> out(static_cast<std::size_t>(q.size()), 0.0);
  auto p = policy_propensities(vals, mode);
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<std::size_t>(idx[i])] = p[i];
  return out;
}

struct EvaluatorConfig {
  std::vector<int> hidden{64, 64};
  double learning_rate = 1e-3;
  TargetUpdate target_update{};

  Json to_json() const { return {{"hidden", hidden}, {"learning_rate", learning_rate}, {"target_update", target_update.to_json()}}; }
  static EvaluatorConfig from_json(const Json& j) {
    EvaluatorConfig c;
    if (j.is_null()) return c;
    c.hidden = j.value("hidden", c.hidden);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.target_update = TargetUpdate::from_json(j.value("target_update", Json()), c.target_update);
    return c;
  }
};

class Model {
 public:
  Algorithm algorithm = Algorithm::Dqn;
  Json model_config = Json::object();
  std::vector<NormalizationSpec> specs;  // state specs, then "action:"-prefixed specs
  Preprocessor state_pp;
  std::optional<Preprocessor> action_pp;
  ActionSpace space;
  std::uint64_t seed = 0;
  std::unique_ptr<Agent> agent;
  // CPE support (discrete actions only).
  std::vector<std::string> series;
  PolicyMode target_policy;
  EvaluatorConfig evaluator_config;
  std::unique_ptr<PolicyEvaluator> evaluator;
  std::unique_ptr<PolicyEvaluator> reward_model;

  /// Builds fresh networks. `series` non-empty enables the CPE evaluator.
  static Model create(Algorithm algorithm, const Json& model_config, std::vector<NormalizationSpec> specs,
                      ActionSpace space, std::uint64_t seed, std::vector<std::string> series = {},
                      PolicyMode target_policy = {}, EvaluatorConfig evaluator_config = {}, bool reward_model = false) {
    Model m;
    m.algorithm = algorithm;
    m.model_config = model_config.is_null() ? Json::object() : model_config;
    m.specs = std::move(specs);
    m.space = std::move(space);
    m.seed = seed;
    m.series = std::move(series);
    m.target_policy = target_policy;
    m.evaluator_config = std::move(evaluator_config);
    m.init_preprocessors();
    m.build(reward_model);
    return m;
  }

  int state_dim() const { return static_cast<int>(state_pp.width()); }
  int action_dim() const {
    if (algorithm == Algorithm::ParametricDqn) return static_cast<int>(action_pp->width());
    return static_cast<int>(space.feature_names.size());
  }
  double gamma() const {
    return model_config.value("gamma", algorithm == Algorithm::Dqn || algorithm == Algorithm::ParametricDqn ? 0.9 : 0.99);
  }
  std::string norm_digest() const { return specs_digest(specs); }

  DqnAgent& dqn() const { return downcast<DqnAgent>(); }
  ParametricDqnAgent& parametric() const { return downcast<ParametricDqnAgent>(); }
  DdpgAgent& ddpg() const { return downcast<DdpgAgent>(); }
  SacAgent& sac() const { return downcast<SacAgent>(); }

  /// Normalized action features for a map-valued action.
  Eigen::RowVectorXd action_vector(const ActionValue& a) const {
    if (a.is_discrete()) throw DataError("expected a feature-map action, got '" + a.name() + "'");
    if (algorithm == Algorithm::ParametricDqn) return action_pp->transform(a.features());
    return dataset_detail::raw_action_vector(a.features(), space.feature_names);
  }

  /// Q(s_t, a_t) of the logged action for each of `rows`.
  Vector logged_q(const TransitionTable& d, const std::vector<std::size_t>& rows) const {
    Matrix s = rl_detail::gather_rows(d.states, rows);
    Vector out(static_cast<Eigen::Index>(rows.size()));
    switch (algorithm) {
      case Algorithm::Dqn: {
        Matrix q = dqn().q_values(s);
        for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Eigen::Index>(i)] = q(static_cast<Eigen::Index>(i), d.actions[rows[i]]);
        break;
      }
      case Algorithm::ParametricDqn:
        out = parametric().online().forward(ac_detail::concat(s, rl_detail::gather_rows(d.action_features, rows))).col(0);
        break;
      case Algorithm::Ddpg:
        out = ddpg().critic().forward(ac_detail::concat(s, ac_detail::clamp_actions(rl_detail::gather_rows(d.action_features, rows)))).col(0);
        break;
      case Algorithm::Sac: {
        Matrix sa = ac_detail::concat(s, ac_detail::clamp_actions(rl_detail::gather_rows(d.action_features, rows)));
        out = sac().critic(0).forward(sa).col(0).cwiseMin(sac().critic(1).forward(sa).col(0));
        break;
      }
    }
    return out;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.header["algorithm"] = algorithm_name(algorithm);
    ck.header["model_config"] = model_config;
    ck.header["normalization"] = specs_to_json(specs);
    ck.header["norm_digest"] = norm_digest();
    ck.header["action_space"] = space.to_json();
    ck.header["seed"] = seed;
    ck.header["series"] = series;
    ck.header["target_policy"] = target_policy.to_string();
    ck.header["evaluator"] = evaluator_config.to_json();
    ck.header["reward_model"] = reward_model != nullptr;
    capture_agent(ck, "policy", *agent);
    if (evaluator) capture_agent(ck, "evaluator", *evaluator);
    if (reward_model) capture_agent(ck, "reward_model", *reward_model);
    return ck;
  }

  static Model from_checkpoint(const Checkpoint& ck) {
    const Json& h = ck.header;
    Model m;
    m.algorithm = parse_algorithm(h.at("algorithm").get<std::string>());
    m.model_config = h.at("model_config");
    m.specs = specs_from_json(h.at("normalization"));
    if (m.norm_digest() != h.at("norm_digest").get<std::string>()) {
      throw DataError("checkpoint normalization digest does not match its embedded specs");
    }
    m.space = ActionSpace::from_json(h.at("action_space"));
    m.seed = h.at("seed").get<std::uint64_t>();
    m.series = h.value("series", std::vector<std::string>{});
    m.target_policy = PolicyMode::parse(h.value("target_policy", std::string("greedy")));
    m.evaluator_config = EvaluatorConfig::from_json(h.value("evaluator", Json()));
    m.init_preprocessors();
    m.build(h.value("reward_model", false));
    restore_agent(ck, "policy", *m.agent);
    if (m.evaluator) restore_agent(ck, "evaluator", *m.evaluator);
    if (m.reward_model) restore_agent(ck, "reward_model", *m.reward_model);
    return m;
  }

 private:
  template <class T>
  T& downcast() const {
    auto* p = dynamic_cast<T*>(agent.get());
    if (p == nullptr) throw DataError(std::string("model is not a ") + algorithm_name(algorithm) + " model");
    return *p;
  }

  void init_preprocessors() {
    auto [state, action] = split_specs(specs);
    state_pp = Preprocessor(state);
    if (!action.empty()) action_pp = Preprocessor(action);
  }

  void build(bool with_reward_model) {
    const int ds = state_dim();
    if (ds == 0) throw DataError("no state features in the normalization specs");
    switch (algorithm) {
      case Algorithm::Dqn:
        if (space.kind != ActionSpace::Kind::Discrete) throw DataError("dqn needs named (discrete) actions");
        agent = std::make_unique<DqnAgent>(DqnConfig::from_json(model_config), ds, space.names, seed);
        break;
      case Algorithm::ParametricDqn:
        if (space.kind != ActionSpace::Kind::Parametric) throw DataError("parametric_dqn needs feature-map actions");
        if (!action_pp) throw DataError("parametric_dqn needs 'action:' normalization specs");
        agent = std::make_unique<ParametricDqnAgent>(DqnConfig::from_json(model_config), ds, action_dim(), seed);
        break;
      case Algorithm::Ddpg:
      case Algorithm::Sac: {
        if (space.kind != ActionSpace::Kind::Continuous) throw DataError("ddpg and sac need feature-map actions");
        auto cfg = ActorCriticConfig::from_json(model_config);
        if (algorithm == Algorithm::Ddpg) {
          agent = std::make_unique<DdpgAgent>(cfg, ds, action_dim(), seed);
        } else {
          agent = std::make_unique<SacAgent>(cfg, ds, action_dim(), seed);
        }
        break;
      }
    }
    if (!series.empty()) {
      if (algorithm != Algorithm::Dqn) throw DataError("CPE evaluation networks need discrete actions");
      const int na = static_cast<int>(space.names.size());
      const int ns = static_cast<int>(series.size());
      const auto& ec = evaluator_config;
      evaluator = std::make_unique<PolicyEvaluator>(ds, na, ns, gamma(), ec.hidden, ec.learning_rate, ec.target_update,
                                                    derive_seed(seed, 0x65, 1));
      if (with_reward_model) {
        reward_model = std::make_unique<PolicyEvaluator>(ds, na, ns, 0.0, ec.hidden, ec.learning_rate, ec.target_update,
                                                         derive_seed(seed, 0x72, 1));
      }
    }
  }
};

}  // namespace batchrl
