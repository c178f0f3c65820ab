#pragma once

// Turns joined transitions into the dense, normalized table consumed by the
// update rules, and infers the action space from the data.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "batchrl/common.hpp"
#include "batchrl/normalization.hpp"
#include "batchrl/rl.hpp"
#include "batchrl/timeline.hpp"

namespace batchrl {

/// Prefix marking action-feature entries in a normalization file.
inline constexpr std::string_view kActionFeaturePrefix = "action:";

/// Splits a normalization spec list into state specs and action specs
/// (prefix removed).
inline std::pair<std::vector<NormalizationSpec>, std::vector<NormalizationSpec>> split_specs(
    const std::vector<NormalizationSpec>& specs) {
  std::vector<NormalizationSpec> state, action;
  for (const auto& s : specs) {
    if (s.feature_id.starts_with(kActionFeaturePrefix)) {
      NormalizationSpec a = s;
      a.feature_id = s.feature_id.substr(kActionFeaturePrefix.size());
      action.push_back(std::move(a));
    } else {
      state.push_back(s);
    }
  }
  return {state, action};
}

struct ActionSpace {
  enum class Kind { Discrete, Parametric, Continuous };
  Kind kind = Kind::Discrete;
  std::vector<std::string> names;          // discrete, index order
  std::vector<std::string> feature_names;  // continuous action features

  int index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return static_cast<int>(i);
    }
    throw DataError("action '" + name + "' is not in the action set");
  }

  Json to_json() const {
    const char* k = kind == Kind::Discrete ? "discrete" : kind == Kind::Parametric ? "parametric" : "continuous";
    return {{"kind", k}, {"names", names}, {"feature_names", feature_names}};
  }

  static ActionSpace from_json(const Json& j) {
    ActionSpace a;
    std::string k = j.at("kind").get<std::string>();
    a.kind = k == "discrete" ? Kind::Discrete : k == "parametric" ? Kind::Parametric : Kind::Continuous;
    a.names = j.value("names", std::vector<std::string>{});
    a.feature_names = j.value("feature_names", std::vector<std::string>{});
    return a;
  }

  /// Discrete names in order of first appearance (possible-action lists
  /// first), or the union of action feature names for map-valued actions.
  static ActionSpace infer(const std::vector<JoinedTransition>& ts, Kind map_kind) {
    ActionSpace a;
    bool any_map = false;
    bool any_name = false;
    std::set<std::string> seen_features;
    auto add_name = [&](const ActionValue& v) {
      if (v.is_discrete()) {
        any_name = true;
        if (std::find(a.names.begin(), a.names.end(), v.name()) == a.names.end()) a.names.push_back(v.name());
      } else {
        any_map = true;
        for (const auto& [k, x] : v.features()) seen_features.insert(k);
      }
    };
    for (const auto& t : ts) {
      if (t.possible_actions) {
        for (const auto& v : *t.possible_actions) add_name(v);
      }
    }
    for (const auto& t : ts) add_name(t.action);
    if (any_map && any_name) throw DataError("data mixes discrete and feature-map actions");
    if (any_map) {
      a.kind = map_kind;
      a.names.clear();
      a.feature_names.assign(seen_features.begin(), seen_features.end());
    }
    if (!any_map && a.names.empty()) throw DataError("no actions found in data");
    return a;
  }
};

/// Transitions grouped into episodes ordered by mdp_id, each ordinal-sorted.
inline std::vector<Episode> canonical_episodes(const std::vector<JoinedTransition>& ts) {
  auto eps = group_episodes(ts);
  std::sort(eps.begin(), eps.end(), [](const Episode& a, const Episode& b) { return a.mdp_id < b.mdp_id; });
  return eps;
}

/// Held-out episode ids: a seeded random `fraction` of the distinct
/// mdp_ids (at least one when there are two or more episodes).
inline std::set<std::string> split_by_mdp(const std::vector<std::string>& ids, double fraction, std::uint64_t seed) {
  std::set<std::string> unique(ids.begin(), ids.end());
  std::vector<std::string> order(unique.begin(), unique.end());
  std::mt19937_64 rng(seed);
  shuffle_in_place(order, rng);
  std::size_t n = 0;
  if (order.size() >= 2 && fraction > 0.0) {
    n = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size()))), 1,
                                order.size() - 1);
  }
  return {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n)};
}

struct TableOptions {
  int multi_step = 1;
  double gamma = 0.9;
  bool use_time_diff = false;
};

namespace dataset_detail {

inline Eigen::RowVectorXd raw_action_vector(const FeatureMap& f, const std::vector<std::string>& names) {
  Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto it = f.find(names[i]);
    if (it != f.end()) v[static_cast<Eigen::Index>(i)] = it->second;
  }
  return v;
}

}  // namespace dataset_detail

/// Builds the dense table for `episodes` (rows contiguous per episode).
/// `action_pp` normalizes parametric action features; continuous actions
/// are used as logged.
inline TransitionTable build_table(const std::vector<Episode>& episodes, const Preprocessor& state_pp,
                                   const Preprocessor* action_pp, const ActionSpace& space,
                                   const RewardWeights& weights, const TableOptions& opt) {
  std::size_t n = 0;
  for (const auto& ep : episodes) n += ep.transitions.size();
  const auto rows = static_cast<Eigen::Index>(n);
  const auto ds = static_cast<Eigen::Index>(state_pp.width());
  TransitionTable t;
  t.states = Matrix::Zero(rows, ds);
  t.next_states = Matrix::Zero(rows, ds);
  t.rewards = Vector::Zero(rows);
  t.time_diff = Vector::Ones(rows);
  t.terminal.assign(n, 1);
  t.mdp_ids.resize(n);
  t.state_columns.resize(state_pp.width());
  for (std::size_t c = 0; c < state_pp.width(); ++c) t.state_columns[c] = state_pp.feature_of_column(c);

  const bool discrete = space.kind == ActionSpace::Kind::Discrete;
  const bool parametric = space.kind == ActionSpace::Kind::Parametric;
  Eigen::Index da = 0;
  if (parametric) {
    if (action_pp == nullptr) throw DataError("parametric actions need action normalization specs");
    da = static_cast<Eigen::Index>(action_pp->width());
  } else if (!discrete) {
    da = static_cast<Eigen::Index>(space.feature_names.size());
  }
  auto action_vec = [&](const ActionValue& v) -> Eigen::RowVectorXd {
    if (v.is_discrete()) throw DataError("expected a feature-map action, got '" + v.name() + "'");
    if (parametric) return action_pp->transform(v.features());
    return dataset_detail::raw_action_vector(v.features(), space.feature_names);
  };

  if (discrete) {
    t.actions.assign(n, 0);
    t.next_actions.assign(n, -1);
    t.next_mask = Matrix::Zero(rows, static_cast<Eigen::Index>(space.names.size()));
    t.has_next_mask.assign(n, 0);
  } else {
    t.action_features = Matrix::Zero(rows, da);
    t.next_action_features = Matrix::Zero(rows, da);
    t.has_next_action.assign(n, 0);
    t.next_candidates.assign(n, {});
  }
  std::map<std::vector<double>, int> candidate_index;
  std::vector<Eigen::RowVectorXd> candidate_rows;
  auto candidate = [&](const Eigen::RowVectorXd& v) {
    std::vector<double> key(v.data(), v.data() + v.size());
    auto [it, inserted] = candidate_index.try_emplace(key, static_cast<int>(candidate_rows.size()));
    if (inserted) candidate_rows.push_back(v);
    return it->second;
  };

  std::size_t r = 0;
  for (const auto& ep : episodes) {
    for (const auto& tr : ep.transitions) {
      auto row = static_cast<Eigen::Index>(r);
      t.mdp_ids[r] = tr.mdp_id;
      Eigen::RowVectorXd tmp(ds);
      state_pp.transform_into(tr.state_features, tmp.data());
      t.states.row(row) = tmp;
      if (tr.next_state_features) {
        state_pp.transform_into(*tr.next_state_features, tmp.data());
        t.next_states.row(row) = tmp;
      }
      t.terminal[r] = tr.terminal ? 1 : 0;
      t.rewards[row] = compute_reward(tr.metrics, weights);
      t.time_diff[row] = static_cast<double>(std::max<std::int64_t>(1, tr.time_diff));
      if (discrete) {
        if (!tr.action.is_discrete()) throw DataError("expected a named action in mdp_id " + tr.mdp_id);
        t.actions[r] = space.index(tr.action.name());
        if (tr.next_action && tr.next_action->is_discrete()) t.next_actions[r] = space.index(tr.next_action->name());
        if (tr.possible_next_actions) {
          t.has_next_mask[r] = 1;
          for (const auto& a : *tr.possible_next_actions) t.next_mask(row, space.index(a.name())) = 1.0;
        }
      } else {
        t.action_features.row(row) = action_vec(tr.action);
        if (tr.next_action) {
          t.next_action_features.row(row) = action_vec(*tr.next_action);
          t.has_next_action[r] = 1;
        }
        if (parametric && tr.possible_next_actions) {
          for (const auto& a : *tr.possible_next_actions) t.next_candidates[r].push_back(candidate(action_vec(a)));
        }
      }
      ++r;
    }
  }
  if (parametric) {
    t.candidates = Matrix::Zero(static_cast<Eigen::Index>(candidate_rows.size()), da);
    for (std::size_t i = 0; i < candidate_rows.size(); ++i) t.candidates.row(static_cast<Eigen::Index>(i)) = candidate_rows[i];
  }
  compute_multistep(t, opt.multi_step, opt.gamma, opt.use_time_diff);
  return t;
}

}  // namespace batchrl
