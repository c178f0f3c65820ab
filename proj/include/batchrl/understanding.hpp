#pragma once

// Data understanding: a mixture-density environment model over (state,
// action) and the checks built on it (feature importance by masking,
// action dependence, and the two problem-formulation verdicts).

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "batchrl/common.hpp"
#include "batchrl/dataset.hpp"
#include "batchrl/nn.hpp"
#include "batchrl/timeline.hpp"

namespace batchrl {

/// Dense inputs for environment-model fitting. Action columns are a one-hot
/// block for discrete actions or the action features otherwise.
struct ModelInputs {
  Matrix states;
  Matrix actions;
  Matrix next_states;
  Vector rewards;
  std::vector<std::uint8_t> has_next;
  std::vector<std::string> mdp_ids;
  std::vector<std::string> state_columns;   // owning feature per state column
  std::vector<std::string> action_columns;  // owning action feature per action column
  std::vector<std::vector<int>> possible;   // discrete: possible action indices per row
  bool discrete = true;

  std::size_t size() const { return static_cast<std::size_t>(states.rows()); }
  int action_count() const { return static_cast<int>(actions.cols()); }
};

/// Action-column owner used for a discrete one-hot block.
inline constexpr const char* kActionBlock = "action";

inline ModelInputs build_model_inputs(const std::vector<JoinedTransition>& ts, const Preprocessor& state_pp,
                                      const Preprocessor* action_pp, const ActionSpace& space,
                                      const RewardWeights& weights) {
  auto eps = canonical_episodes(ts);
  auto table = build_table(eps, state_pp, action_pp, space, weights, TableOptions{});
  ModelInputs m;
  const auto n = static_cast<Eigen::Index>(table.size());
  m.states = table.states;
  m.next_states = table.next_states;
  m.rewards = table.rewards;
  m.mdp_ids = table.mdp_ids;
  m.state_columns = table.state_columns;
  m.has_next.resize(table.size());
  for (std::size_t i = 0; i < table.size(); ++i) m.has_next[i] = table.terminal[i] ? 0 : 1;
  m.discrete = space.kind == ActionSpace::Kind::Discrete;
  if (m.discrete) {
    const auto k = static_cast<Eigen::Index>(space.names.size());
    m.actions = Matrix::Zero(n, k);
    m.action_columns.assign(space.names.size(), kActionBlock);
    m.possible.resize(table.size());
    std::size_t r = 0;
    for (const auto& ep : eps) {
      for (const auto& tr : ep.transitions) {
        m.actions(static_cast<Eigen::Index>(r), table.actions[r]) = 1.0;
        if (tr.possible_actions) {
          for (const auto& a : *tr.possible_actions) m.possible[r].push_back(space.index(a.name()));
        } else {
          for (int a = 0; a < static_cast<int>(k); ++a) m.possible[r].push_back(a);
        }
        ++r;
      }
    }
  } else {
    m.actions = table.action_features;
    if (space.kind == ActionSpace::Kind::Parametric) {
      for (std::size_t c = 0; c < action_pp->width(); ++c) m.action_columns.push_back(action_pp->feature_of_column(c));
    } else {
      m.action_columns = space.feature_names;
    }
  }
  return m;
}

enum class FitTarget { NextState, Reward };

struct EnvModelConfig {
  int k = 3;
  int epochs = 30;
  double learning_rate = 1e-3;
  std::vector<int> hidden{64, 64};
  int batch_size = 128;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;

  Json to_json() const {
    return {{"k", k},         {"epochs", epochs},         {"learning_rate", learning_rate},
            {"hidden", hidden}, {"batch_size", batch_size}, {"holdout_fraction", holdout_fraction},
            {"seed", seed}};
  }
  static EnvModelConfig from_json(const Json& j) {
    EnvModelConfig c;
    c.k = j.value("k", c.k);
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.hidden = j.value("hidden", c.hidden);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
    c.seed = j.value("seed", c.seed);
    if (c.k < 1) throw DataError("k must be >= 1");
    if (c.epochs < 1 || c.batch_size < 1) throw DataError("epochs and batch_size must be >= 1");
    return c;
  }
};

/// Mixture-density model of the next state or the reward given (s, a).
struct EnvModel {
  FitTarget target = FitTarget::NextState;
  int k = 3;
  int d = 1;
  Mlp net;
  Eigen::RowVectorXd state_means;   // training means used for masking
  Eigen::RowVectorXd action_means;
  double target_mean = 0.0;  // reward standardization (reward target only)
  double target_scale = 1.0;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> eval_rows;
  double initial_nll = 0.0;
  double heldout_nll = 0.0;
  bool converged = true;

  Matrix inputs(const Matrix& states, const Matrix& actions) const {
    Matrix x(states.rows(), states.cols() + actions.cols());
    x << states, actions;
    return x;
  }

  Matrix targets(const ModelInputs& m, const std::vector<std::size_t>& rows) const {
    Matrix y(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto r = static_cast<Eigen::Index>(rows[i]);
      if (target == FitTarget::NextState) {
        y.row(static_cast<Eigen::Index>(i)) = m.next_states.row(r);
      } else {
        y(static_cast<Eigen::Index>(i), 0) = (m.rewards[r] - target_mean) / target_scale;
      }
    }
    return y;
  }

  /// Mean per-row NLL of `rows` for the given state and action matrices
  /// (full-size, indexed by row).
  double nll(const ModelInputs& m, const std::vector<std::size_t>& rows, const Matrix& states,
             const Matrix& actions) const {
    if (rows.empty()) return 0.0;
    Matrix x(static_cast<Eigen::Index>(rows.size()), states.cols() + actions.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto r = static_cast<Eigen::Index>(rows[i]);
      x.row(static_cast<Eigen::Index>(i)) << states.row(r), actions.row(r);
    }
    Vector per = gmm_nll_batch(net.forward(x), targets(m, rows), k, d);
    return pairwise_sum(std::span<const double>(per.data(), static_cast<std::size_t>(per.size()))) /
           static_cast<double>(per.size());
  }

  double nll(const ModelInputs& m, const std::vector<std::size_t>& rows) const {
    return nll(m, rows, m.states, m.actions);
  }

  /// Mixture mean of the (standardized) target for one input row.
  Eigen::RowVectorXd predict_mean(const Eigen::RowVectorXd& state, const Eigen::RowVectorXd& action) const {
    Matrix x(1, state.size() + action.size());
    x << state, action;
    Matrix raw = net.forward(x);
    return GmmHeadOutput::from_raw(raw.data(), k, d).mean();
  }
};

/// Fits the model on an 80/20 mdp_id split; the held-out NLL is recorded.
inline EnvModel fit_env_model(const ModelInputs& m, FitTarget target, const EnvModelConfig& cfg) {
  EnvModel model;
  model.target = target;
  model.k = cfg.k;
  model.d = target == FitTarget::NextState ? static_cast<int>(m.states.cols()) : 1;
  auto held = split_by_mdp(m.mdp_ids, cfg.holdout_fraction, derive_seed(cfg.seed, 1));
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (target == FitTarget::NextState && !m.has_next[i]) continue;
    (held.contains(m.mdp_ids[i]) ? model.eval_rows : model.train_rows).push_back(i);
  }
  if (model.train_rows.empty()) throw DataError("no rows to fit the environment model");
  if (model.eval_rows.empty()) {
    log_warning("environment model has no held-out episodes; evaluating on training rows");
    model.eval_rows = model.train_rows;
  }
  model.state_means = Eigen::RowVectorXd::Zero(m.states.cols());
  model.action_means = Eigen::RowVectorXd::Zero(m.actions.cols());
  std::vector<double> rewards;
  for (std::size_t r : model.train_rows) {
    model.state_means += m.states.row(static_cast<Eigen::Index>(r));
    model.action_means += m.actions.row(static_cast<Eigen::Index>(r));
    rewards.push_back(m.rewards[static_cast<Eigen::Index>(r)]);
  }
  model.state_means /= static_cast<double>(model.train_rows.size());
  model.action_means /= static_cast<double>(model.train_rows.size());
  // Constant columns keep their exact value so masking them is a no-op.
  auto pin_constant = [&](const Matrix& x, Eigen::RowVectorXd& means) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      double first = x(static_cast<Eigen::Index>(model.train_rows.front()), c);
      bool constant = std::all_of(model.train_rows.begin(), model.train_rows.end(),
                                  [&](std::size_t r) { return x(static_cast<Eigen::Index>(r), c) == first; });
      if (constant) means[c] = first;
    }
  };
  pin_constant(m.states, model.state_means);
  pin_constant(m.actions, model.action_means);
  if (target == FitTarget::Reward) {
    model.target_mean = pairwise_sum(rewards) / static_cast<double>(rewards.size());
    double var = 0.0;
    for (double r : rewards) var += (r - model.target_mean) * (r - model.target_mean);
    var /= static_cast<double>(rewards.size());
    model.target_scale = var > 1e-12 ? std::sqrt(var) : 1.0;
  }

  MlpSpec spec;
  spec.widths.push_back(static_cast<int>(m.states.cols() + m.actions.cols()));
  for (int h : cfg.hidden) spec.widths.push_back(h);
  spec.widths.push_back(gmm_raw_width(model.k, model.d));
  spec.seed = cfg.seed;
  model.net = Mlp(spec);
  model.initial_nll = model.nll(m, model.eval_rows);

  AdamState adam(model.net.size(), cfg.learning_rate);
  std::mt19937_64 rng(derive_seed(cfg.seed, 2));
  std::vector<std::size_t> order = model.train_rows;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
      Matrix x(static_cast<Eigen::Index>(batch.size()), spec.widths.front());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        auto r = static_cast<Eigen::Index>(batch[i]);
        x.row(static_cast<Eigen::Index>(i)) << m.states.row(r), m.actions.row(r);
      }
      ForwardCache cache;
      Matrix raw = model.net.forward(x, &cache);
      Matrix draw;
      Vector per = gmm_nll_batch(raw, model.targets(m, batch), model.k, model.d, &draw);
      if (!per.allFinite()) throw NumericalError("environment model loss became non-finite");
      Vector grad;
      model.net.backward(cache, draw, grad);
      adam_step(model.net.params(), grad, adam);
    }
  }
  model.heldout_nll = model.nll(m, model.eval_rows);
  model.converged = model.heldout_nll < model.initial_nll;
  return model;
}

/// NLL increase on the held-out rows when each feature is set to its
/// training mean. Keys are state feature ids, then action feature ids.
inline std::map<std::string, double> feature_importance(const EnvModel& model, const ModelInputs& m,
                                                        bool include_actions = true) {
  const double base = model.nll(m, model.eval_rows);
  std::vector<std::pair<std::string, bool>> features;  // (name, is_action)
  std::set<std::string> seen;
  for (const auto& c : m.state_columns) {
    if (seen.insert(c).second) features.emplace_back(c, false);
  }
  if (include_actions) {
    std::set<std::string> seen_a;
    for (const auto& c : m.action_columns) {
      if (seen_a.insert(c).second) features.emplace_back(c, true);
    }
  }
  std::vector<double> scores(features.size());
  parallel_for(features.size(), [&](std::size_t f) {
    const auto& [name, is_action] = features[f];
    Matrix states = m.states;
    Matrix actions = m.actions;
    const auto& columns = is_action ? m.action_columns : m.state_columns;
    Matrix& target = is_action ? actions : states;
    const Eigen::RowVectorXd& means = is_action ? model.action_means : model.state_means;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (columns[c] != name) continue;
      for (std::size_t r : model.eval_rows) target(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = means[static_cast<Eigen::Index>(c)];
    }
    scores[f] = model.nll(m, model.eval_rows, states, actions) - base;
  });
  std::map<std::string, double> out;
  for (std::size_t f = 0; f < features.size(); ++f) {
    std::string key = features[f].second ? std::string(kActionFeaturePrefix) + features[f].first : features[f].first;
    out[key] = scores[f];
  }
  return out;
}

/// Mean over held-out steps of the spread (max - min across possible
/// actions) of the predicted next-state mean, per state feature, divided
/// by the feature's standard deviation. Continuous actions are probed with
/// `action_samples` uniform draws from [-1, 1].
inline std::map<std::string, double> action_dependence(const EnvModel& model, const ModelInputs& m,
                                                       int action_samples = 0, std::uint64_t seed = 0) {
  if (model.target != FitTarget::NextState) throw DataError("action dependence needs a next-state model");
  if (!m.discrete && action_samples < 2) {
    throw DataError("action dependence needs enumerable actions; set action_samples >= 2 for continuous actions");
  }
  const auto dcols = m.states.cols();
  std::vector<Eigen::RowVectorXd> spreads(model.eval_rows.size());
  parallel_for(model.eval_rows.size(), [&](std::size_t i) {
    auto r = static_cast<Eigen::Index>(model.eval_rows[i]);
    std::vector<Eigen::RowVectorXd> candidates;
    if (m.discrete) {
      for (int a : m.possible[static_cast<std::size_t>(r)]) {
        Eigen::RowVectorXd one = Eigen::RowVectorXd::Zero(m.actions.cols());
        one[a] = 1.0;
        candidates.push_back(one);
      }
    } else {
      std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
      for (int s = 0; s < action_samples; ++s) {
        Eigen::RowVectorXd a(m.actions.cols());
        for (Eigen::Index c = 0; c < a.size(); ++c) a[c] = uniform(rng, -1.0, 1.0);
        candidates.push_back(a);
      }
    }
    Eigen::RowVectorXd lo = Eigen::RowVectorXd::Constant(dcols, std::numeric_limits<double>::infinity());
    Eigen::RowVectorXd hi = -lo;
    for (const auto& a : candidates) {
      Eigen::RowVectorXd mean = model.predict_mean(m.states.row(r), a);
      lo = lo.cwiseMin(mean);
      hi = hi.cwiseMax(mean);
    }
    spreads[i] = candidates.empty() ? Eigen::RowVectorXd::Zero(dcols) : Eigen::RowVectorXd(hi - lo);
  });
  std::map<std::string, double> out;
  for (Eigen::Index c = 0; c < dcols; ++c) {
    std::vector<double> values, spread;
    for (std::size_t i = 0; i < model.eval_rows.size(); ++i) {
      values.push_back(m.next_states(static_cast<Eigen::Index>(model.eval_rows[i]), c));
      spread.push_back(spreads[i][c]);
    }
    double mean_spread = spread.empty() ? 0.0 : pairwise_sum(spread) / static_cast<double>(spread.size());
    double mu = values.empty() ? 0.0 : pairwise_sum(values) / static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mu) * (v - mu);
    double sd = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
    double score = mean_spread == 0.0 ? 0.0 : mean_spread / std::max(sd, 1e-8);
    const auto& name = m.state_columns[static_cast<std::size_t>(c)];
    auto it = out.find(name);
    out[name] = it == out.end() ? score : std::max(it->second, score);
  }
  return out;
}

struct CheckThresholds {
  double action_importance = 0.01;  // nats
  double state_importance = 0.01;   // nats
  double reward_importance = 0.01;  // nats
  double dependence = 0.1;          // stddev-normalized

  Json to_json() const {
    return {{"epsilon_action", action_importance},
            {"epsilon_state", state_importance},
            {"epsilon_reward", reward_importance},
            {"epsilon_dependence", dependence}};
  }
};

struct DataHealthReport {
  std::map<std::string, double> transition_importance;
  std::map<std::string, double> reward_importance;
  std::map<std::string, double> dependence;
  bool transitions_predictable = false;
  bool reward_state_action_link = false;
  std::string transitions_explanation;
  std::string reward_explanation;
  double transition_nll = 0.0;
  double reward_nll = 0.0;
  std::vector<std::string> warnings;
  CheckThresholds thresholds;
  EnvModelConfig config;

  Json to_json() const {
    auto ranked = [](const std::map<std::string, double>& m) {
      std::vector<std::pair<std::string, double>> v(m.begin(), m.end());
      std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
      Json out = Json::array();
      for (const auto& [k, s] : v) out.push_back({{"feature", k}, {"score", s}});
      return out;
    };
    return {{"thresholds", thresholds.to_json()},
            {"model", config.to_json()},
            {"verdicts",
             {{"transitions_predictable", transitions_predictable},
              {"reward_state_action_link", reward_state_action_link}}},
            {"explanations",
             {{"transitions_predictable", transitions_explanation},
              {"reward_state_action_link", reward_explanation}}},
            {"heldout_nll", {{"next_state", transition_nll}, {"reward", reward_nll}}},
            {"transition_importance", ranked(transition_importance)},
            {"reward_importance", ranked(reward_importance)},
            {"action_dependence", ranked(dependence)},
            {"warnings", warnings}};
  }
};

/// Verdicts from scores and thresholds only.
inline void apply_verdicts(DataHealthReport& rep) {
  const auto& th = rep.thresholds;
  std::string best_action, best_state;
  double action_score = -std::numeric_limits<double>::infinity();
  double state_score = -std::numeric_limits<double>::infinity();
  for (const auto& [k, v] : rep.transition_importance) {
    bool is_action = k.starts_with(kActionFeaturePrefix);
    double& best = is_action ? action_score : state_score;
    if (v > best) {
      best = v;
      (is_action ? best_action : best_state) = k;
    }
  }
  bool action_ok = action_score > th.action_importance;
  bool state_ok = state_score > th.state_importance;
  rep.transitions_predictable = action_ok && state_ok;
  auto fmt = [](double x) { return std::isfinite(x) ? std::to_string(x) : std::string("n/a"); };
  if (rep.transitions_predictable) {
    rep.transitions_explanation = "action feature '" + best_action + "' (" + fmt(action_score) +
                                  " nats) and state feature '" + best_state + "' (" + fmt(state_score) +
                                  " nats) both predict the next state";
  } else if (!state_ok) {
    rep.transitions_explanation = "no state feature predicts the next state (best " + fmt(state_score) +
                                  " nats); the data has no sequential structure";
  } else {
    rep.transitions_explanation =
        "no action feature predicts the next state (best " + fmt(action_score) + " nats); actions do not steer transitions";
  }

  std::string linked;
  double linked_score = 0.0;
  for (const auto& [f, dep] : rep.dependence) {
    auto it = rep.reward_importance.find(f);
    if (it == rep.reward_importance.end()) continue;
    if (dep > th.dependence && it->second > th.reward_importance) {
      double score = std::min(dep, it->second);
      if (linked.empty() || score > linked_score) {
        linked = f;
        linked_score = score;
      }
    }
  }
  rep.reward_state_action_link = !linked.empty();
  rep.reward_explanation = rep.reward_state_action_link
                               ? "state feature '" + linked + "' depends on actions and predicts rewards"
                               : "no state feature both depends on actions and predicts rewards; the problem reduces "
                                 "to a multi-armed bandit";
}

inline DataHealthReport run_checks(const ModelInputs& m, const EnvModelConfig& cfg,
                                   const CheckThresholds& thresholds = {}, int action_samples = 8) {
  DataHealthReport rep;
  rep.thresholds = thresholds;
  rep.config = cfg;
  EnvModel trans = fit_env_model(m, FitTarget::NextState, cfg);
  EnvModelConfig rcfg = cfg;
  rcfg.seed = derive_seed(cfg.seed, 7);
  EnvModel reward = fit_env_model(m, FitTarget::Reward, rcfg);
  rep.transition_nll = trans.heldout_nll;
  rep.reward_nll = reward.heldout_nll;
  if (!trans.converged) rep.warnings.push_back("next-state model did not improve on its initialization");
  if (!reward.converged) rep.warnings.push_back("reward model did not improve on its initialization");
  rep.transition_importance = feature_importance(trans, m);
  rep.reward_importance = feature_importance(reward, m);
  rep.dependence = action_dependence(trans, m, m.discrete ? 0 : action_samples, cfg.seed);
  apply_verdicts(rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Synthetic generators with known structure

enum class SyntheticKind { TrueMdp, ContextualBandit, StateFreeReward };

/// Two state features (x carries signal, noise is independent N(0,1) each
/// step) and actions {down, up}.
///  TrueMdp: x' = 0.8 x + 0.5 (2a - 1) + N(0, 0.1^2), reward = x + N(0, 0.1^2).
///  ContextualBandit: x' ~ U(-1, 1) fresh, reward = x (2a - 1) + N(0, 0.1^2).
///  StateFreeReward: transitions as TrueMdp, reward = (2a - 1) + N(0, 0.1^2).
inline std::vector<JoinedTransition> synthetic_transitions(SyntheticKind kind, std::size_t episodes,
                                                           std::size_t length, std::uint64_t seed) {
  std::vector<RawRow> rows;
  const std::vector<ActionValue> actions{ActionValue("down"), ActionValue("up")};
  for (std::size_t e = 0; e < episodes; ++e) {
    std::mt19937_64 rng(derive_seed(seed, e));
    double x = uniform(rng, -1.0, 1.0);
    for (std::size_t t = 0; t < length; ++t) {
      int a = uniform01(rng) < 0.5 ? 1 : 0;
      double sign = 2.0 * a - 1.0;
      double reward = 0.0;
      switch (kind) {
        case SyntheticKind::TrueMdp: reward = x + 0.1 * standard_normal(rng); break;
        case SyntheticKind::ContextualBandit: reward = x * sign + 0.1 * standard_normal(rng); break;
        case SyntheticKind::StateFreeReward: reward = sign + 0.1 * standard_normal(rng); break;
      }
      RawRow r;
      r.mdp_id = "syn-" + std::to_string(e);
      r.sequence_number = static_cast<std::int64_t>(t);
      r.state_features = {{"x", x}, {"noise", standard_normal(rng)}};
      r.action = actions[static_cast<std::size_t>(a)];
      r.action_probability = 0.5;
      r.possible_actions = actions;
      r.metrics = {{"reward", reward}};
      rows.push_back(std::move(r));
      if (kind == SyntheticKind::ContextualBandit) {
        x = uniform(rng, -1.0, 1.0);
      } else {
        x = 0.8 * x + 0.5 * sign + 0.1 * standard_normal(rng);
      }
    }
  }
  return timeline_join(std::move(rows));
}

}  // namespace batchrl
