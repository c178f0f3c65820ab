#pragma once

// Scores states with a trained model and emits decisions in the logging
// format, so responses joined with observed rewards feed the next training
// run.

#include <boost/uuid/name_generator_sha1.hpp>
#include <boost/uuid/uuid_io.hpp>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "batchrl/envs.hpp"
#include "batchrl/model.hpp"
#include "batchrl/policy.hpp"

namespace batchrl {

struct ScoringRequest {
  FeatureMap state_features;
  std::optional<std::vector<ActionValue>> possible_actions;
  std::string mdp_id;
  std::int64_t sequence_number = 0;

  static ScoringRequest from_json(const Json& j) {
    if (!j.is_object()) throw DataError("request must be a JSON object");
    ScoringRequest r;
    auto sf = j.find("state_features");
    if (sf == j.end()) throw DataError("missing field 'state_features'");
    r.state_features = feature_map_from_json(*sf, "state_features");
    if (auto it = j.find("possible_actions"); it != j.end() && !it->is_null()) {
      if (!it->is_array()) throw DataError("possible_actions must be an array");
      std::vector<ActionValue> acts;
      for (const auto& a : *it) acts.push_back(ActionValue::from_json(a));
      if (acts.empty()) throw DataError("possible_actions must not be empty");
      r.possible_actions = std::move(acts);
    }
    if (auto it = j.find("mdp_id"); it != j.end()) {
      r.mdp_id = it->is_string() ? it->get<std::string>() : it->dump();
    }
    if (auto it = j.find("sequence_number"); it != j.end()) {
      if (!it->is_number_integer()) throw DataError("sequence_number must be an integer");
      r.sequence_number = it->get<std::int64_t>();
    }
    return r;
  }
};

struct ScoringResponse {
  ActionValue action;
  PolicyDecision decision;
  std::vector<ActionValue> possible_actions;
  std::vector<double> scores;  // Q per possible action (empty for continuous)
  std::string sample_key;
  std::string model_version;
  std::string mdp_id;
  std::int64_t sequence_number = 0;
  FeatureMap state_features;
  std::optional<double> threshold;

  /// Logging row awaiting its reward: metrics are left empty.
  RawRow raw_row() const {
    RawRow r;
    r.mdp_id = mdp_id.empty() ? sample_key : mdp_id;
    r.sequence_number = sequence_number;
    r.state_features = state_features;
    r.action = action;
    r.action_probability = decision.propensity;
    if (!possible_actions.empty()) r.possible_actions = possible_actions;
    return r;
  }

  Json to_json() const {
    Json j = batchrl::to_json(raw_row());
    j["sample_key"] = sample_key;
    j["model_version"] = model_version;
    Json props = Json::array();
    for (std::size_t i = 0; i < possible_actions.size(); ++i) {
      props.push_back({{"action", possible_actions[i].to_json()}, {"propensity", decision.propensities[i]}});
    }
    j["propensities"] = props;
    if (!scores.empty()) j["scores"] = scores;
    if (threshold) j["threshold"] = *threshold;
    return j;
  }
};

struct ServingOptions {
  std::string policy = "greedy";  // greedy | epsilon:<e> | softmax:<t> | threshold
  std::string send_action = "send";
  double threshold = 0.5;
  std::optional<double> pid_target;  // send rate the PID controller tracks
  int pid_window = 100;              // requests per controller update
  double kp = 0.5;
  double ki = 0.05;
  double kd = 0.0;
  std::uint64_t seed = 0;
};

/// Stable digest of a checkpoint's bytes, used as the model version.
inline std::string model_version(const std::string& checkpoint_bytes) { return hex64(fnv1a64(checkpoint_bytes)); }

class Scorer {
 public:
  Scorer(Model model, std::string version, ServingOptions opt = {})
      : model_(std::move(model)), version_(std::move(version)), opt_(std::move(opt)), rng_(opt_.seed) {
    boost::uuids::name_generator_sha1 gen(boost::uuids::ns::oid());
    run_id_ = boost::uuids::to_string(gen(version_ + ":" + std::to_string(opt_.seed)));
    threshold_mode_ = opt_.policy == "threshold";
    if (!threshold_mode_) mode_ = PolicyMode::parse(opt_.policy);
    pid_.kp = opt_.kp;
    pid_.ki = opt_.ki;
    pid_.kd = opt_.kd;
    pid_.threshold = opt_.threshold;
    if (opt_.pid_target) {
      if (!threshold_mode_) throw UsageError("--pid-target needs the threshold policy");
      if (!(*opt_.pid_target > 0.0 && *opt_.pid_target < 1.0)) throw UsageError("PID target rate must be in (0, 1)");
      pid_.target_rate = *opt_.pid_target;
    }
    if (threshold_mode_ && model_.algorithm != Algorithm::Dqn) throw UsageError("threshold policy needs a dqn model");
  }

  static Scorer from_file(const std::string& path, ServingOptions opt = {}) {
    std::string bytes = read_file_bytes(path);
    return Scorer(Model::from_checkpoint(parse_checkpoint(bytes, path)), model_version(bytes), std::move(opt));
  }

  const Model& model() const { return model_; }
  const std::string& run_id() const { return run_id_; }
  const PidController& pid() const { return pid_; }

  /// Normalized state row, warning once per unknown or missing feature.
  Eigen::RowVectorXd features(const FeatureMap& f) {
    const auto& layout = model_.state_pp.layout();
    for (const auto& [k, v] : f) {
      if (!layout.contains(k) && warned_.insert("+" + k).second) {
        log_warning("feature '" + k + "' is not in the model's normalization specs; ignored");
      }
    }
    for (const auto& [k, slot] : layout) {
      if (!f.contains(k) && warned_.insert("-" + k).second) {
        log_warning("feature '" + k + "' missing from request; zero-filled");
      }
    }
    return model_.state_pp.transform(f);
  }

  ScoringResponse score(const ScoringRequest& req) {
    ScoringResponse out;
    out.model_version = version_;
    out.sample_key = run_id_ + "-" + std::to_string(counter_++);
    out.mdp_id = req.mdp_id;
    out.sequence_number = req.sequence_number;
    out.state_features = req.state_features;
    Eigen::RowVectorXd s = features(req.state_features);
    switch (model_.algorithm) {
      case Algorithm::Dqn: score_discrete(s, req, out); break;
      case Algorithm::ParametricDqn: score_parametric(s, req, out); break;
      case Algorithm::Ddpg:
      case Algorithm::Sac: score_continuous(s, out); break;
    }
    return out;
  }

  struct BatchStats {
    std::size_t scored = 0;
    std::vector<std::string> errors;
  };

  /// Scores a JSONL request file. Bad lines are reported with their line
  /// number and skipped.
  BatchStats batch_score(const std::string& in_path, const std::string& out_path, const std::string& rows_path = {}) {
    std::ifstream in(in_path);
    if (!in) throw DataError("cannot open " + in_path);
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + out_path);
    std::ofstream rows;
    if (!rows_path.empty()) {
      rows.open(rows_path, std::ios::trunc);
      if (!rows) throw DataError("cannot write " + rows_path);
    }
    BatchStats st;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        ScoringResponse r = score(ScoringRequest::from_json(Json::parse(line)));
        out << r.to_json().dump() << '\n';
        if (rows.is_open()) rows << batchrl::to_json(r.raw_row()).dump() << '\n';
        ++st.scored;
      } catch (const Json::exception& e) {
        st.errors.push_back(in_path + ":" + std::to_string(n) + ": invalid JSON: " + e.what());
      } catch (const Error& e) {
        st.errors.push_back(in_path + ":" + std::to_string(n) + ": " + e.what());
      }
    }
    for (const auto& e : st.errors) log_warning(e);
    return st;
  }

 private:
  std::vector<ActionValue> discrete_possible(const ScoringRequest& req) const {
    if (req.possible_actions) return *req.possible_actions;
    std::vector<ActionValue> all;
    for (const auto& n : model_.space.names) all.emplace_back(n);
    return all;
  }

  void score_discrete(const Eigen::RowVectorXd& s, const ScoringRequest& req, ScoringResponse& out) {
    out.possible_actions = discrete_possible(req);
    Matrix q = model_.dqn().q_values(Matrix(s));
    for (const auto& a : out.possible_actions) {
      if (!a.is_discrete()) throw DataError("dqn model needs named possible actions");
      out.scores.push_back(q(0, model_.space.index(a.name())));
    }
    if (threshold_mode_) {
      score_threshold(out);
    } else {
      out.decision = select_action(out.scores, mode_, rng_);
    }
    out.action = out.possible_actions[out.decision.chosen];
  }

  void score_threshold(ScoringResponse& out) {
    if (out.possible_actions.size() != 2) throw DataError("threshold policy needs exactly two possible actions");
    std::size_t send = 0;
    for (std::size_t i = 0; i < 2; ++i) {
      if (out.possible_actions[i].name() == opt_.send_action) send = i;
    }
    std::size_t drop = 1 - send;
    out.threshold = pid_.threshold;
    bool sent = threshold_policy(out.scores[send], out.scores[drop], pid_.threshold);
    out.decision.chosen = sent ? send : drop;
    out.decision.propensities.assign(2, 0.0);
    out.decision.propensities[out.decision.chosen] = 1.0;
    out.decision.propensity = 1.0;
    window_sent_ += sent ? 1 : 0;
    if (opt_.pid_target && ++window_count_ >= opt_.pid_window) {
      pid_.update(static_cast<double>(window_sent_) / static_cast<double>(window_count_));
      window_sent_ = 0;
      window_count_ = 0;
    }
  }

  void score_parametric(const Eigen::RowVectorXd& s, const ScoringRequest& req, ScoringResponse& out) {
    if (!req.possible_actions) throw DataError("parametric models need possible_actions in each request");
    out.possible_actions = *req.possible_actions;
    Matrix cand(static_cast<Eigen::Index>(out.possible_actions.size()), model_.action_dim());
    for (std::size_t i = 0; i < out.possible_actions.size(); ++i) {
      cand.row(static_cast<Eigen::Index>(i)) = model_.action_vector(out.possible_actions[i]);
    }
    Vector q = model_.parametric().parametric_q(s, cand);
    out.scores.assign(q.data(), q.data() + q.size());
    out.decision = select_action(out.scores, mode_, rng_);
    out.action = out.possible_actions[out.decision.chosen];
  }

  void score_continuous(const Eigen::RowVectorXd& s, ScoringResponse& out) {
    Matrix a = model_.algorithm == Algorithm::Ddpg ? model_.ddpg().act(Matrix(s)) : model_.sac().act(Matrix(s));
    FeatureMap f;
    for (std::size_t k = 0; k < model_.space.feature_names.size(); ++k) {
      f[model_.space.feature_names[k]] = a(0, static_cast<Eigen::Index>(k));
    }
    out.action = ActionValue(f);
    out.decision.chosen = 0;
    out.decision.propensity = 1.0;
    out.decision.propensities = {1.0};
    out.possible_actions = {out.action};
  }

  Model model_;
  std::string version_;
  ServingOptions opt_;
  std::mt19937_64 rng_;
  std::string run_id_;
  std::uint64_t counter_ = 0;
  bool threshold_mode_ = false;
  PolicyMode mode_;
  PidController pid_;
  int window_count_ = 0;
  int window_sent_ = 0;
  std::set<std::string> warned_;
};

/// Greedy policy of a discrete model acting in an environment.
inline DiscretePolicy greedy_env_policy(const Model& model, const Environment& env) {
  std::vector<int> index;
  for (const auto& name : env.actions()) index.push_back(model.space.index(name));
  return [&model, &env, index](const State& s, std::mt19937_64&) {
    Matrix q = model.dqn().q_values(Matrix(model.state_pp.transform(env.features(s))));
    int best = 0;
    for (int a = 1; a < static_cast<int>(index.size()); ++a) {
      if (q(0, index[static_cast<std::size_t>(a)]) > q(0, index[static_cast<std::size_t>(best)])) best = a;
    }
    return best;
  };
}

/// Deterministic actor of a continuous model acting in an environment.
inline ContinuousPolicy actor_env_policy(const Model& model, const Environment& env) {
  std::vector<Eigen::Index> column;
  for (const auto& name : env.action_feature_names()) {
    auto it = std::find(model.space.feature_names.begin(), model.space.feature_names.end(), name);
    if (it == model.space.feature_names.end()) throw DataError("model has no action feature '" + name + "'");
    column.push_back(it - model.space.feature_names.begin());
  }
  return [&model, &env, column](const State& s) {
    Matrix x(model.state_pp.transform(env.features(s)));
    Matrix a = model.algorithm == Algorithm::Ddpg ? model.ddpg().act(x) : model.sac().act(x);
    std::vector<double> out;
    for (auto c : column) out.push_back(a(0, c));
    return out;
  };
}

}  // namespace batchrl
