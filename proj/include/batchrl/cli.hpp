#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 data
// validation error, 3 numerical abort.

#include <CLI11.hpp>
#include <iostream>

#include "batchrl/pipeline.hpp"

namespace batchrl {

namespace cli_detail {

inline std::map<std::string, FeatureKind> parse_overrides(const std::vector<std::string>& items) {
  std::map<std::string, FeatureKind> out;
  for (const auto& it : items) {
    auto eq = it.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--override expects <feature>=<kind>, got '" + it + "'");
    try {
      out[it.substr(0, eq)] = parse_kind(it.substr(eq + 1));
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
  }
  return out;
}

/// A training config, or the "train" block of an experiment file.
inline TrainConfig load_train_config(const std::string& path) {
  Json j = read_json_file(path);
  try {
    if (j.is_object() && j.contains("train")) return TrainConfig::from_json(j.at("train"));
    return TrainConfig::from_json(j);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  } catch (const Json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline std::string default_e2e_dir(const std::string& env, std::uint64_t seed) {
  return (std::filesystem::temp_directory_path() / ("batchrl-e2e-" + env + "-" + std::to_string(seed))).string();
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Batch reinforcement learning pipeline: logged rows to trained, evaluated and served policies.",
               "batchrl"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages");

  // timeline
  std::string tl_in, tl_out, tl_weights;
  auto* tl = app.add_subcommand("timeline", "Join logged rows into transitions");
  tl->add_option("--input", tl_in, "Logged rows (JSONL)")->required();
  tl->add_option("--output", tl_out, "Joined transitions (JSONL)")->required();
  tl->add_option("--reward-weights", tl_weights, "JSON map metric -> weight; adds a shaped 'reward' field");

  // normalize
  std::string nm_in, nm_out;
  std::vector<std::string> nm_overrides;
  NormalizeOptions nm_opt;
  auto* nm = app.add_subcommand("normalize", "Identify feature kinds and fit normalization specs");
  nm->add_option("--input", nm_in, "Transitions (JSONL)")->required();
  nm->add_option("--output", nm_out, "Normalization specs (JSON)")->required();
  nm->add_option("--sample", nm_opt.sample, "Fit on a random sample of N transitions (0 = all)");
  nm->add_option("--seed", nm_opt.seed, "Sampling seed");
  nm->add_option("--override", nm_overrides, "Pin a kind: <feature>=<binary|probability|continuous|boxcox|quantile|enum>");
  nm->add_option("--min-samples", nm_opt.config.min_samples, "Minimum samples per feature");
  nm->add_option("--enum-threshold", nm_opt.config.enum_threshold, "Max distinct integer values for enum");
  nm->add_option("--quantile-buckets", nm_opt.config.quantile_buckets, "Quantile table size");

  // understand
  std::string un_in, un_norm, un_report, un_weights;
  UnderstandOptions un_opt;
  auto* un = app.add_subcommand("understand", "Check whether logged data supports reinforcement learning");
  un->add_option("--input", un_in, "Transitions (JSONL)")->required();
  un->add_option("--norm", un_norm, "Normalization specs (JSON)")->required();
  un->add_option("--report", un_report, "Data health report (JSON)")->required();
  un->add_option("--k", un_opt.model.k, "Gaussian mixture components")->check(CLI::PositiveNumber);
  un->add_option("--epochs", un_opt.model.epochs, "Training epochs per model");
  un->add_option("--learning-rate", un_opt.model.learning_rate, "Adam learning rate");
  un->add_option("--batch-size", un_opt.model.batch_size, "Minibatch size");
  un->add_option("--holdout", un_opt.model.holdout_fraction, "Fraction of episodes held out");
  un->add_option("--seed", un_opt.model.seed, "Random seed");
  un->add_option("--action-samples", un_opt.action_samples, "Sampled actions per row for continuous actions");
  un->add_option("--eps-action", un_opt.thresholds.action_importance, "Action importance threshold (nats)");
  un->add_option("--eps-state", un_opt.thresholds.state_importance, "State importance threshold (nats)");
  un->add_option("--eps-reward", un_opt.thresholds.reward_importance, "Reward importance threshold (nats)");
  un->add_option("--eps-dependence", un_opt.thresholds.dependence, "Action dependence threshold");
  un->add_option("--reward-weights", un_weights, "JSON map metric -> weight (default {\"reward\": 1})");

  // train
  std::string tr_cfg, tr_in, tr_norm, tr_out, tr_resume;
  std::optional<std::uint64_t> tr_seed;
  auto* trn = app.add_subcommand("train", "Train a policy; writes checkpoint and per-epoch metrics");
  trn->add_option("--config", tr_cfg, "Training config or experiment file (JSON)")->required();
  trn->add_option("--input", tr_in, "Transitions (JSONL)")->required();
  trn->add_option("--norm", tr_norm, "Normalization specs (JSON)")->required();
  trn->add_option("--out", tr_out, "Output directory")->required();
  trn->add_option("--resume", tr_resume, "Warm start from this checkpoint");
  trn->add_option("--seed", tr_seed, "Override the config seed");

  // evaluate
  std::string ev_model, ev_in, ev_report, ev_weights;
  std::optional<std::string> ev_policy;
  std::uint64_t ev_seed = 0;
  auto* ev = app.add_subcommand("evaluate", "Counterfactual policy evaluation of a checkpoint");
  ev->add_option("--model", ev_model, "Checkpoint")->required();
  ev->add_option("--input", ev_in, "Transitions (JSONL)")->required();
  ev->add_option("--target-policy", ev_policy, "greedy|softmax:T|epsilon:E (default: the checkpoint's)");
  ev->add_option("--report", ev_report, "CPE report (JSON)")->required();
  ev->add_option("--reward-weights", ev_weights, "JSON map metric -> weight (default: the checkpoint's)");
  ev->add_option("--seed", ev_seed, "Bootstrap seed");

  // score
  std::string sc_model, sc_in, sc_out, sc_rows;
  ServingOptions sc_opt;
  auto* sc = app.add_subcommand("score", "Score requests with a checkpoint");
  sc->add_option("--model", sc_model, "Checkpoint")->required();
  sc->add_option("--input", sc_in, "Scoring requests (JSONL)")->required();
  sc->add_option("--out", sc_out, "Responses (JSONL)")->required();
  sc->add_option("--rows", sc_rows, "Also write logging rows awaiting rewards (JSONL)");
  sc->add_option("--policy", sc_opt.policy, "greedy|epsilon:E|softmax:T|threshold");
  sc->add_option("--threshold", sc_opt.threshold, "Initial send threshold");
  sc->add_option("--send-action", sc_opt.send_action, "Name of the send action in threshold mode");
  sc->add_option("--pid-target", sc_opt.pid_target, "Target send rate tracked by the PID controller");
  sc->add_option("--pid-window", sc_opt.pid_window, "Requests per controller update")->check(CLI::PositiveNumber);
  sc->add_option("--kp", sc_opt.kp, "PID proportional gain");
  sc->add_option("--ki", sc_opt.ki, "PID integral gain");
  sc->add_option("--kd", sc_opt.kd, "PID derivative gain");
  sc->add_option("--seed", sc_opt.seed, "Exploration and run-id seed");

  // run-env
  RunEnvOptions re_opt;
  std::string re_out, re_cfg;
  auto* re = app.add_subcommand("run-env", "Log episodes of a behavior policy in a simulated environment");
  re->add_option("--env", re_opt.env, "gridworld|cartpole|pointmass");
  re->add_option("--env-config", re_cfg, "Environment parameters (JSON)");
  re->add_option("--policy", re_opt.policy, "uniform|eps:<v>|softmax:<t>");
  re->add_option("--episodes", re_opt.episodes, "Episodes to log");
  re->add_option("--seed", re_opt.seed, "Random seed");
  re->add_option("--out", re_out, "Logged rows (JSONL)")->required();

  // e2e
  std::string e2e_env = "gridworld", e2e_cfg, e2e_out;
  std::uint64_t e2e_seed = 0;
  auto* e2e = app.add_subcommand("e2e", "run-env, timeline, normalize, understand, train and evaluate in one go");
  e2e->add_option("--env", e2e_env, "gridworld|cartpole|pointmass");
  e2e->add_option("--config", e2e_cfg, "Experiment file (default: built-in settings for --env)");
  e2e->add_option("--seed", e2e_seed, "Seed for data, training and evaluation");
  e2e->add_option("--out", e2e_out, "Working directory (default: <tmp>/batchrl-e2e-<env>-<seed>)");

  for (auto* sub : app.get_subcommands({})) {
    for (auto* opt : sub->get_options()) {
      if (!opt->get_required() && opt->get_default_str().empty() && opt->get_type_size() != 0) opt->default_str("none");
    }
  }
  if (argc > 1 && argv[1][0] != '-') {
    std::string name = argv[1];
    auto subs = app.get_subcommands({});
    bool known = std::any_of(subs.begin(), subs.end(), [&](const CLI::App* a) { return a->get_name() == name; });
    if (!known) {
      err << "error: unknown subcommand '" << name << "'\n\n" << app.help();
      return 1;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return 1;
  }
  info_logging_enabled() = !quiet;

  try {
    if (*tl) {
      auto n = timeline_stage(tl_in, tl_out, tl_weights);
      out << "wrote " << n << " transitions to " << tl_out << '\n';
    } else if (*nm) {
      nm_opt.overrides = cli_detail::parse_overrides(nm_overrides);
      auto specs = normalize_stage(nm_in, nm_out, nm_opt);
      for (const auto& s : specs) out << s.feature_id << '\t' << kind_name(s.kind) << '\n';
    } else if (*un) {
      if (!un_weights.empty()) un_opt.reward_weights = read_json_file(un_weights);
      auto rep = understand_stage(un_in, un_norm, un_report, un_opt);
      out << "transitions predictable: " << (rep.transitions_predictable ? "yes" : "no") << " - "
          << rep.transitions_explanation << '\n';
      out << "reward linked to state and action: " << (rep.reward_state_action_link ? "yes" : "no") << " - "
          << rep.reward_explanation << '\n';
    } else if (*trn) {
      TrainConfig cfg = cli_detail::load_train_config(tr_cfg);
      if (tr_seed) cfg.seed = *tr_seed;
      Trainer t = train_stage(cfg, tr_in, tr_norm, tr_out, tr_resume);
      out << "trained " << t.epoch() << " epochs; checkpoint " << (std::filesystem::path(tr_out) / "checkpoint.bin").string()
          << '\n';
      if (!t.history().empty() && !t.history().back().cpe.empty()) out << format_cpe_table(t.history().back().cpe);
    } else if (*ev) {
      EvaluateOptions eo;
      eo.target_policy = ev_policy;
      if (!ev_weights.empty()) eo.reward_weights = read_json_file(ev_weights);
      eo.cpe.seed = ev_seed;
      out << format_cpe_table(evaluate_stage(ev_model, ev_in, ev_report, eo));
    } else if (*sc) {
      require_file(sc_model);
      require_file(sc_in);
      Scorer scorer = Scorer::from_file(sc_model, sc_opt);
      auto st = scorer.batch_score(sc_in, sc_out, sc_rows);
      out << "scored " << st.scored << " requests, " << st.errors.size() << " errors\n";
      if (!st.errors.empty()) return 2;
    } else if (*re) {
      if (!re_cfg.empty()) re_opt.env_config = read_json_file(re_cfg);
      auto rows = run_env_stage(re_opt, re_out);
      out << "wrote " << rows.size() << " rows to " << re_out << '\n';
    } else if (*e2e) {
      ExperimentConfig exp = e2e_cfg.empty() ? default_experiment(e2e_env) : load_experiment(e2e_cfg);
      if (e2e_out.empty()) e2e_out = cli_detail::default_e2e_dir(exp.env, e2e_seed);
      auto r = run_e2e(exp, e2e_seed, e2e_out);
      out << "environment: " << exp.env << "  seed: " << e2e_seed << "  rows: " << r.rows << "  directory: " << e2e_out
          << '\n';
      out << "data check: transitions predictable " << (r.health.transitions_predictable ? "yes" : "no")
          << ", reward linked to state and action " << (r.health.reward_state_action_link ? "yes" : "no") << '\n';
      out << r.quality.description << ": " << r.quality.greedy << '\n';
      if (r.evaluated) {
        out << format_cpe_table(r.report);
      } else {
        out << "no CPE for " << TrainConfig::from_json(exp.train).algorithm << " models\n";
      }
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  } catch (const Json::exception& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace batchrl
