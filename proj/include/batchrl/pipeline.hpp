#pragma once

// File-level pipeline stages: each reads its inputs from disk, runs one
// module and writes its outputs, so the CLI subcommands and the end-to-end
// run share one implementation.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "batchrl/experiment.hpp"
#include "batchrl/serving.hpp"
#include "batchrl/understanding.hpp"

namespace batchrl {

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f << j.dump(2) << '\n';
  if (!f) throw DataError("failed writing " + path);
}

inline void require_file(const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) throw DataError("input file not found: " + path);
}

// ---------------------------------------------------------------------------
// run-env

struct RunEnvOptions {
  std::string env = "gridworld";
  Json env_config = Json::object();
  std::string policy = "eps:0.3";
  std::size_t episodes = 1000;
  std::size_t min_rows = 0;  // > 0: log whole episodes until this many rows
  std::uint64_t seed = 0;
};

inline std::vector<RawRow> run_env_stage(const RunEnvOptions& o, const std::string& out_path) {
  auto env = make_environment(o.env, o.env_config);
  auto policy = BehaviorPolicy::parse(o.policy);
  auto rows = o.min_rows > 0 ? generate_logged_rows(*env, policy, o.min_rows, o.seed)
                             : generate_logged_data(*env, policy, o.episodes, o.seed);
  write_raw_rows(out_path, rows);
  return rows;
}

// ---------------------------------------------------------------------------
// timeline

/// Joins logged rows; with weights, each output row also carries its shaped
/// `reward`.
inline std::size_t timeline_stage(const std::string& in_path, const std::string& out_path,
                                  const std::string& weights_path = {}) {
  require_file(in_path);
  auto ts = timeline_join(read_raw_rows(in_path));
  std::optional<RewardWeights> weights;
  if (!weights_path.empty()) weights = reward_weights_from_json(read_json_file(weights_path), metric_names(ts));
  std::ofstream f(out_path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + out_path);
  for (const auto& t : ts) {
    Json j = to_json(t);
    if (weights) j["reward"] = compute_reward(t.metrics, *weights);
    f << j.dump() << '\n';
  }
  if (!f) throw DataError("failed writing " + out_path);
  return ts.size();
}

// ---------------------------------------------------------------------------
// normalize

struct NormalizeOptions {
  std::size_t sample = 0;  // 0: every transition
  std::uint64_t seed = 0;
  std::map<std::string, FeatureKind> overrides;
  NormalizationConfig config;
};

/// Specs for state features and, for map-valued actions, "action:" specs.
inline std::vector<NormalizationSpec> fit_transition_normalization(const std::vector<JoinedTransition>& ts,
                                                                   const NormalizeOptions& o = {}) {
  std::vector<std::size_t> idx(ts.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (o.sample > 0 && o.sample < ts.size()) {
    std::mt19937_64 rng(o.seed);
    shuffle_in_place(idx, rng);
    idx.resize(o.sample);
    std::sort(idx.begin(), idx.end());
  }
  std::vector<FeatureMap> actions;
  std::vector<const FeatureMap*> rows;
  for (auto i : idx) rows.push_back(&ts[i].state_features);
  for (auto i : idx) {
    if (ts[i].action.is_discrete()) continue;
    FeatureMap a;
    for (const auto& [k, v] : ts[i].action.features()) a[std::string(kActionFeaturePrefix) + k] = v;
    actions.push_back(std::move(a));
  }
  for (const auto& a : actions) rows.push_back(&a);
  return fit_normalization(rows, o.config, o.overrides);
}

inline std::vector<NormalizationSpec> normalize_stage(const std::string& in_path, const std::string& out_path,
                                                      const NormalizeOptions& o = {}) {
  require_file(in_path);
  auto specs = fit_transition_normalization(read_transitions(in_path), o);
  write_json_file(out_path, specs_to_json(specs));
  return specs;
}

inline std::vector<NormalizationSpec> read_norm_file(const std::string& path) {
  try {
    return specs_from_json(read_json_file(path));
  } catch (const Json::exception& e) {
    throw DataError(path + ": invalid normalization file: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// understand

struct UnderstandOptions {
  EnvModelConfig model;
  CheckThresholds thresholds;
  int action_samples = 8;
  Json reward_weights = Json{{"reward", 1.0}};
};

inline DataHealthReport understand_stage(const std::string& in_path, const std::string& norm_path,
                                         const std::string& report_path, const UnderstandOptions& o = {}) {
  require_file(in_path);
  require_file(norm_path);
  auto ts = read_transitions(in_path);
  if (ts.empty()) throw DataError(in_path + " has no transitions");
  auto [state_specs, action_specs] = split_specs(read_norm_file(norm_path));
  Preprocessor state_pp(state_specs);
  std::optional<Preprocessor> action_pp;
  if (!action_specs.empty()) action_pp.emplace(action_specs);
  auto space = ActionSpace::infer(ts, ActionSpace::Kind::Continuous);
  auto weights = reward_weights_from_json(o.reward_weights, metric_names(ts));
  auto inputs = build_model_inputs(ts, state_pp, action_pp ? &*action_pp : nullptr, space, weights);
  auto rep = run_checks(inputs, o.model, o.thresholds, o.action_samples);
  if (!report_path.empty()) write_json_file(report_path, rep.to_json());
  return rep;
}

// ---------------------------------------------------------------------------
// train

inline Trainer train_stage(const TrainConfig& cfg, const std::string& in_path, const std::string& norm_path,
                           const std::string& out_dir, const std::string& resume_path = {}) {
  require_file(in_path);
  require_file(norm_path);
  auto ts = read_transitions(in_path);
  Trainer tr(cfg, read_norm_file(norm_path), ts);
  if (!resume_path.empty()) tr.resume(load_checkpoint(resume_path));
  tr.run(out_dir);
  return tr;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
  std::optional<std::string> target_policy;  // default: the checkpoint's
  std::optional<Json> reward_weights;         // default: the checkpoint's
  CpeOptions cpe;
};

/// Off-policy estimates of a checkpoint's target policy on every
/// transition of `in_path`. An estimator that cannot be computed on the data
/// is reported as NaN with a warning.
inline std::vector<CpeEstimate> evaluate_stage(const std::string& model_path, const std::string& in_path,
                                               const std::string& report_path, const EvaluateOptions& o = {}) {
  require_file(model_path);
  require_file(in_path);
  Checkpoint ck = load_checkpoint(model_path);
  Model model = Model::from_checkpoint(ck);
  if (!model.evaluator) throw DataError(model_path + " has no CPE evaluation network (train a dqn model with CPE enabled)");
  if (o.target_policy) model.target_policy = PolicyMode::parse(*o.target_policy);
  auto ts = read_transitions(in_path);
  if (ts.empty()) throw DataError(in_path + " has no transitions");
  Json weights_json = o.reward_weights ? *o.reward_weights
                                       : ck.header.value("train_config", Json::object()).value("reward_weights", Json{{"reward", 1.0}});
  auto weights = reward_weights_from_json(weights_json, metric_names(ts));
  auto data = prepare_training_data(ts, model, weights, model.series);
  std::vector<std::size_t> rows(data.rows.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  auto ds = collect_and_sort(eval_samples(model, data, rows), model.gamma());
  std::vector<std::string> failures;
  auto report = cpe_report(ds, o.cpe, &failures);
  for (const auto& f : failures) log_warning(f);
  if (!report_path.empty()) {
    std::int64_t epoch = ck.header.value("epoch", std::int64_t{0});
    Json j = Json::array();
    for (const auto& e : report) j.push_back(to_json(e, epoch));
    write_json_file(report_path, j);
  }
  return report;
}

/// Fixed-width table of the shaped-reward estimates.
inline std::string format_cpe_table(const std::vector<CpeEstimate>& report) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "estimator" << std::right << std::setw(14) << "raw" << std::setw(14)
     << "normalized" << '\n';
  auto num = [](double x) {
    std::ostringstream s;
    if (std::isfinite(x)) {
      s << std::fixed << std::setprecision(4) << x;
    } else {
      s << "n/a";
    }
    return s.str();
  };
  for (const auto& e : report) {
    if (e.metric != kShapedReward) continue;
    os << std::left << std::setw(24) << e.estimator << std::right << std::setw(14) << num(e.raw) << std::setw(14)
       << num(e.normalized) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// End-to-end run

struct PolicyQuality {
  double greedy = 0.0;     // value of the learned policy
  double reference = 0.0;  // optimal value where known, else the behavior policy's
  std::string description;
};

/// Value of the trained policy in the experiment's environment: exact DP
/// from the start cell for gridworld, 100-episode rollouts otherwise.
inline PolicyQuality policy_quality(const ExperimentConfig& exp, const Model& model, std::uint64_t seed) {
  PolicyQuality q;
  if (exp.env == "gridworld") {
    GridworldConfig gc = GridworldConfig::from_json(exp.env_config);
    gc.random_start = false;
    Gridworld env(gc);
    auto pol = greedy_env_policy(model, env);
    std::vector<int> acts;
    for (int c = 0; c < env.cells(); ++c) {
      std::mt19937_64 rng;
      acts.push_back(env.is_wall(c) ? 0 : pol({static_cast<double>(c)}, rng));
    }
    q.greedy = true_policy_value(env.tabular(), deterministic_policy_table(acts, 4), env.gamma(), gc.start);
    q.reference = value_iteration(env.tabular(), env.gamma()).values[gc.start];
    q.description = "greedy start-state value (optimal " + std::to_string(q.reference) + ")";
    return q;
  }
  auto env = exp.make_env();
  auto behavior = BehaviorPolicy::parse(exp.behavior);
  auto probs = make_propensity_fn(*env, behavior);
  if (env->continuous_actions()) {
    q.greedy = rollout_continuous(*env, actor_env_policy(model, *env), 100, derive_seed(seed, 0x726f6c6c)).mean_return;
    std::mt19937_64 rng(derive_seed(seed, 0x62656876));
    auto names = env->action_feature_names();
    q.reference = rollout_continuous(
                      *env, [&](const State&) {
                        std::vector<double> a(names.size());
                        for (auto& x : a) x = uniform(rng, -1.0, 1.0);
                        return a;
                      },
                      100, derive_seed(seed, 0x726f6c6c))
                      .mean_return;
  } else {
    q.greedy = rollout(*env, greedy_env_policy(model, *env), 100, derive_seed(seed, 0x726f6c6c)).mean_return;
    q.reference = rollout(
                      *env, [&](const State& s, std::mt19937_64& rng) { return static_cast<int>(sample_index(probs(s), rng)); },
                      100, derive_seed(seed, 0x726f6c6c))
                      .mean_return;
  }
  q.description = "greedy mean return over 100 episodes (behavior " + std::to_string(q.reference) + ")";
  return q;
}

struct E2eResult {
  std::size_t rows = 0;
  std::size_t transitions = 0;
  DataHealthReport health;
  std::vector<CpeEstimate> report;
  std::vector<EpochRecord> history;
  PolicyQuality quality;
  bool evaluated = false;
};

/// run-env -> timeline -> normalize -> understand -> train -> evaluate, with
/// every intermediate file written under `dir`.
inline E2eResult run_e2e(const ExperimentConfig& exp, std::uint64_t seed, const std::string& dir,
                         const UnderstandOptions& understand = {}) {
  std::filesystem::create_directories(dir);
  auto path = [&](const std::string& name) { return (std::filesystem::path(dir) / name).string(); };
  E2eResult r;
  RunEnvOptions env_opt;
  env_opt.env = exp.env;
  env_opt.env_config = exp.env_config;
  env_opt.policy = exp.behavior;
  env_opt.min_rows = exp.transitions;
  env_opt.seed = seed;
  log_info("run-env: logging " + std::to_string(exp.transitions) + " transitions in " + exp.env);
  r.rows = run_env_stage(env_opt, path("rows.jsonl")).size();
  r.transitions = timeline_stage(path("rows.jsonl"), path("transitions.jsonl"));
  log_info("timeline: " + std::to_string(r.transitions) + " transitions");
  normalize_stage(path("transitions.jsonl"), path("norm.json"));
  UnderstandOptions uo = understand;
  uo.model.seed = seed;
  r.health = understand_stage(path("transitions.jsonl"), path("norm.json"), path("understand.json"), uo);
  log_info(std::string("understand: transitions predictable = ") + (r.health.transitions_predictable ? "yes" : "no") +
           ", reward linked to state and action = " + (r.health.reward_state_action_link ? "yes" : "no"));
  TrainConfig cfg = TrainConfig::from_json(exp.train);
  cfg.seed = seed;
  Trainer tr = train_stage(cfg, path("transitions.jsonl"), path("norm.json"), path("train"));
  r.history = tr.history();
  r.quality = policy_quality(exp, tr.model(), seed);
  if (tr.model().evaluator) {
    EvaluateOptions eo;
    eo.cpe = cfg.cpe_options;
    eo.cpe.seed = seed;
    r.report = evaluate_stage(path("train/checkpoint.bin"), path("transitions.jsonl"), path("cpe_report.json"), eo);
    r.evaluated = true;
  }
  return r;
}

}  // namespace batchrl
