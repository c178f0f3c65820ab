#pragma once

// Timeline join: turns as-logged rows into (s, a, r, s', a') transitions and
// shapes rewards from the per-row metrics map.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "batchrl/common.hpp"

namespace batchrl {

/// A discrete action name or a parametric/continuous feature map.
class ActionValue {
 public:
  ActionValue() = default;
  ActionValue(std::string name) : value_(std::move(name)) {}  // NOLINT: implicit by intent
  ActionValue(const char* name) : value_(std::string(name)) {}
  ActionValue(FeatureMap features) : value_(std::move(features)) {}

  bool is_discrete() const { return std::holds_alternative<std::string>(value_); }
  const std::string& name() const { return std::get<std::string>(value_); }
  const FeatureMap& features() const { return std::get<FeatureMap>(value_); }

  Json to_json() const {
    if (is_discrete()) return name();
    return feature_map_to_json(features());
  }

  static ActionValue from_json(const Json& j) {
    if (j.is_string()) return ActionValue(j.get<std::string>());
    if (j.is_object()) return ActionValue(feature_map_from_json(j, "action"));
    throw DataError("action must be a string or an object of features");
  }

  friend bool operator==(const ActionValue&, const ActionValue&) = default;

 private:
  std::variant<std::string, FeatureMap> value_;
};

/// One logged observation as produced by a serving system.
struct RawRow {
  std::string mdp_id;
  std::int64_t sequence_number = 0;
  FeatureMap state_features;
  ActionValue action;
  double action_probability = 1.0;
  FeatureMap metrics;
  std::optional<std::vector<ActionValue>> possible_actions;
  // Explicit end-of-episode marker; absent means "infer from the data".
  std::optional<bool> terminal;
};

struct JoinedTransition {
  std::string mdp_id;
  std::int64_t sequence_number = 0;
  FeatureMap state_features;
  ActionValue action;
  double action_probability = 1.0;
  FeatureMap metrics;
  std::optional<std::vector<ActionValue>> possible_actions;

  std::optional<FeatureMap> next_state_features;
  std::optional<ActionValue> next_action;
  std::int64_t sequence_number_ordinal = 1;
  std::int64_t time_diff = 1;
  std::optional<std::vector<ActionValue>> possible_next_actions;
  bool terminal = true;
};

using RewardWeights = std::map<std::string, double>;

struct Episode {
  std::string mdp_id;
  std::vector<JoinedTransition> transitions;
};

namespace detail {

inline Json actions_to_json(const std::vector<ActionValue>& actions) {
  Json arr = Json::array();
  for (const auto& a : actions) arr.push_back(a.to_json());
  return arr;
}

inline std::vector<ActionValue> actions_from_json(const Json& j, std::string_view what) {
  if (!j.is_array()) throw DataError(std::string(what) + " must be an array");
  std::vector<ActionValue> out;
  out.reserve(j.size());
  for (const auto& a : j) out.push_back(ActionValue::from_json(a));
  return out;
}

inline bool contains_action(const std::vector<ActionValue>& set, const ActionValue& a) {
  return std::find(set.begin(), set.end(), a) != set.end();
}

}  // namespace detail

inline Json to_json(const RawRow& r) {
  Json j;
  j["mdp_id"] = r.mdp_id;
  j["sequence_number"] = r.sequence_number;
  j["state_features"] = feature_map_to_json(r.state_features);
  j["action"] = r.action.to_json();
  j["action_probability"] = r.action_probability;
  j["metrics"] = feature_map_to_json(r.metrics);
  if (r.possible_actions) j["possible_actions"] = detail::actions_to_json(*r.possible_actions);
  if (r.terminal) j["terminal"] = *r.terminal;
  return j;
}

/// Parses and validates one input row. Errors carry no location; the
/// JSONL reader prefixes the line number.
inline RawRow raw_row_from_json(const Json& j) {
  if (!j.is_object()) throw DataError("row must be a JSON object");
  auto require = [&](const char* key) -> const Json& {
    auto it = j.find(key);
    if (it == j.end()) throw DataError(std::string("missing field '") + key + "'");
    return *it;
  };
  RawRow r;
  const Json& id = require("mdp_id");
  if (id.is_string()) {
    r.mdp_id = id.get<std::string>();
  } else if (id.is_number_integer()) {
    r.mdp_id = std::to_string(id.get<std::int64_t>());
  } else {
    throw DataError("mdp_id must be a string");
  }
  const Json& seq = require("sequence_number");
  if (!seq.is_number_integer()) throw DataError("sequence_number must be an integer");
  r.sequence_number = seq.get<std::int64_t>();
  r.state_features = feature_map_from_json(require("state_features"), "state_features");
  r.action = ActionValue::from_json(require("action"));
  const Json& prob = require("action_probability");
  if (!prob.is_number()) throw DataError("action_probability must be a number");
  r.action_probability = prob.get<double>();
  if (!(r.action_probability > 0.0 && r.action_probability <= 1.0)) {
    throw DataError("action_probability must lie in (0, 1], got " + prob.dump());
  }
  if (auto it = j.find("metrics"); it != j.end()) r.metrics = feature_map_from_json(*it, "metrics");
  if (auto it = j.find("possible_actions"); it != j.end() && !it->is_null()) {
    r.possible_actions = detail::actions_from_json(*it, "possible_actions");
    if (!r.possible_actions->empty() && !detail::contains_action(*r.possible_actions, r.action)) {
      throw DataError("action " + r.action.to_json().dump() + " is not among possible_actions");
    }
  }
  if (auto it = j.find("terminal"); it != j.end() && !it->is_null()) {
    if (!it->is_boolean()) throw DataError("terminal must be a boolean");
    r.terminal = it->get<bool>();
  }
  return r;
}

inline Json to_json(const JoinedTransition& t) {
  Json j;
  j["mdp_id"] = t.mdp_id;
  j["sequence_number"] = t.sequence_number;
  j["state_features"] = feature_map_to_json(t.state_features);
  j["action"] = t.action.to_json();
  j["action_probability"] = t.action_probability;
  j["metrics"] = feature_map_to_json(t.metrics);
  if (t.possible_actions) j["possible_actions"] = detail::actions_to_json(*t.possible_actions);
  j["next_state_features"] =
      t.next_state_features ? feature_map_to_json(*t.next_state_features) : Json(nullptr);
  j["next_action"] = t.next_action ? t.next_action->to_json() : Json(nullptr);
  j["sequence_number_ordinal"] = t.sequence_number_ordinal;
  j["time_diff"] = t.time_diff;
  j["possible_next_actions"] =
      t.possible_next_actions ? detail::actions_to_json(*t.possible_next_actions) : Json(nullptr);
  j["terminal"] = t.terminal;
  return j;
}

inline JoinedTransition transition_from_json(const Json& j) {
  RawRow base = raw_row_from_json(j);
  JoinedTransition t;
  t.mdp_id = std::move(base.mdp_id);
  t.sequence_number = base.sequence_number;
  t.state_features = std::move(base.state_features);
  t.action = std::move(base.action);
  t.action_probability = base.action_probability;
  t.metrics = std::move(base.metrics);
  t.possible_actions = std::move(base.possible_actions);
  if (auto it = j.find("next_state_features"); it != j.end() && !it->is_null()) {
    t.next_state_features = feature_map_from_json(*it, "next_state_features");
  }
  if (auto it = j.find("next_action"); it != j.end() && !it->is_null()) {
    t.next_action = ActionValue::from_json(*it);
  }
  if (auto it = j.find("sequence_number_ordinal"); it != j.end()) {
    if (!it->is_number_integer() || it->get<std::int64_t>() < 1) {
      throw DataError("sequence_number_ordinal must be an integer >= 1");
    }
    t.sequence_number_ordinal = it->get<std::int64_t>();
  } else {
    throw DataError("missing field 'sequence_number_ordinal'");
  }
  if (auto it = j.find("time_diff"); it != j.end() && it->is_number_integer()) {
    t.time_diff = it->get<std::int64_t>();
  }
  if (auto it = j.find("possible_next_actions"); it != j.end() && !it->is_null()) {
    t.possible_next_actions = detail::actions_from_json(*it, "possible_next_actions");
  }
  t.terminal = !t.next_state_features.has_value();
  return t;
}

namespace detail {

template <class T, class Parse>
std::vector<T> read_jsonl(const std::string& path, Parse parse) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open input file: " + path);
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse(Json::parse(line)));
    } catch (const Json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": invalid JSON: " + e.what());
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

template <class T>
void write_jsonl(const std::string& path, const std::vector<T>& items) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open output file: " + path);
  for (const auto& item : items) out << to_json(item).dump() << '\n';
  if (!out) throw DataError("failed writing " + path);
}

}  // namespace detail

inline std::vector<RawRow> read_raw_rows(const std::string& path) {
  return detail::read_jsonl<RawRow>(path, raw_row_from_json);
}

inline void write_raw_rows(const std::string& path, const std::vector<RawRow>& rows) {
  detail::write_jsonl(path, rows);
}

inline std::vector<JoinedTransition> read_transitions(const std::string& path) {
  return detail::read_jsonl<JoinedTransition>(path, transition_from_json);
}

inline void write_transitions(const std::string& path, const std::vector<JoinedTransition>& ts) {
  detail::write_jsonl(path, ts);
}

/// Pairs every row with its successor in the same MDP. Output is in
/// canonical order (mdp_id, then sequence number), so any permutation of
/// the input yields identical output.
inline std::vector<JoinedTransition> timeline_join(std::vector<RawRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const RawRow& a, const RawRow& b) {
    if (a.mdp_id != b.mdp_id) return a.mdp_id < b.mdp_id;
    return a.sequence_number < b.sequence_number;
  });
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].mdp_id == rows[i - 1].mdp_id &&
        rows[i].sequence_number == rows[i - 1].sequence_number) {
      throw DataError("duplicate (mdp_id, sequence_number) key: (" + rows[i].mdp_id + ", " +
                      std::to_string(rows[i].sequence_number) + ")");
    }
  }

  std::vector<JoinedTransition> out;
  out.reserve(rows.size());
  std::size_t begin = 0;
  while (begin < rows.size()) {
    std::size_t end = begin;
    while (end < rows.size() && rows[end].mdp_id == rows[begin].mdp_id) ++end;
    for (std::size_t i = begin; i < end; ++i) {
      RawRow& r = rows[i];
      JoinedTransition t;
      t.mdp_id = r.mdp_id;
      t.sequence_number = r.sequence_number;
      t.state_features = r.state_features;
      t.action = r.action;
      t.action_probability = r.action_probability;
      t.metrics = r.metrics;
      t.possible_actions = r.possible_actions;
      t.sequence_number_ordinal = static_cast<std::int64_t>(i - begin + 1);
      bool last = (i + 1 == end);
      bool forced_terminal = r.terminal.value_or(false);
      if (forced_terminal && !last) {
        throw DataError("row (" + r.mdp_id + ", " + std::to_string(r.sequence_number) +
                        ") is flagged terminal but later rows exist for the same mdp_id");
      }
      if (!last) {
        const RawRow& nxt = rows[i + 1];
        t.next_state_features = nxt.state_features;
        t.next_action = nxt.action;
        t.time_diff = nxt.sequence_number - r.sequence_number;
        t.possible_next_actions = nxt.possible_actions;
        t.terminal = false;
      } else {
        t.time_diff = 1;
        t.terminal = true;
        // An empty list keeps "possible actions were logged" distinguishable
        // from "not logged" for terminal rows.
        if (r.possible_actions) t.possible_next_actions = std::vector<ActionValue>{};
      }
      out.push_back(std::move(t));
    }
    begin = end;
  }
  return out;
}

/// Dot product of metrics and weights; metrics absent from a row count as 0.
inline double compute_reward(const FeatureMap& metrics, const RewardWeights& weights) {
  double r = 0.0;
  for (const auto& [name, w] : weights) {
    auto it = metrics.find(name);
    if (it != metrics.end()) r += w * it->second;
  }
  return r;
}

/// Validates weights against the metric names seen in the data.
inline RewardWeights reward_weights_from_json(const Json& j,
                                              const std::set<std::string>& known_metrics) {
  if (!j.is_object()) throw DataError("reward weights must be a JSON object");
  RewardWeights w;
  for (const auto& [name, v] : j.items()) {
    if (!v.is_number()) throw DataError("reward weight '" + name + "' must be a number");
    double x = v.get<double>();
    if (!std::isfinite(x)) throw DataError("reward weight '" + name + "' is not finite");
    if (!known_metrics.empty() && !known_metrics.contains(name)) {
      throw DataError("reward weight names unknown metric '" + name + "'");
    }
    w[name] = x;
  }
  return w;
}

template <class Row>
std::set<std::string> metric_names(const std::vector<Row>& rows) {
  std::set<std::string> names;
  for (const auto& r : rows) {
    for (const auto& [k, v] : r.metrics) names.insert(k);
  }
  return names;
}

/// Groups transitions by mdp_id in order of first appearance; each episode
/// is sorted by ordinal.
inline std::vector<Episode> group_episodes(const std::vector<JoinedTransition>& transitions) {
  std::vector<Episode> episodes;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& t : transitions) {
    auto [it, inserted] = index.try_emplace(t.mdp_id, episodes.size());
    if (inserted) episodes.push_back(Episode{t.mdp_id, {}});
    episodes[it->second].transitions.push_back(t);
  }
  for (auto& ep : episodes) {
    auto& ts = ep.transitions;
    std::stable_sort(ts.begin(), ts.end(), [](const auto& a, const auto& b) {
      return a.sequence_number_ordinal < b.sequence_number_ordinal;
    });
    for (std::size_t i = 1; i < ts.size(); ++i) {
      if (ts[i].sequence_number_ordinal == ts[i - 1].sequence_number_ordinal) {
        throw DataError("duplicate ordinal " + std::to_string(ts[i].sequence_number_ordinal) +
                        " in mdp_id " + ep.mdp_id);
      }
    }
  }
  return episodes;
}

}  // namespace batchrl
