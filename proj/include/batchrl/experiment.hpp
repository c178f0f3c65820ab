#pragma once

// Experiment files: environment, behavior policy, logged data size and the
// training config, as used by the e2e pipeline and the shipped configs.

#include <fstream>
#include <memory>
#include <string>

#include "batchrl/envs.hpp"
#include "batchrl/trainer.hpp"

namespace batchrl {

struct ExperimentConfig {
  std::string env = "gridworld";
  Json env_config = Json::object();
  std::string behavior = "eps:0.3";
  std::size_t transitions = 10000;
  Json train = Json::object();

  Json to_json() const {
    return {{"env", env}, {"env_config", env_config}, {"behavior", behavior}, {"transitions", transitions}, {"train", train}};
  }

  static ExperimentConfig from_json(const Json& j) {
    if (!j.is_object()) throw DataError("experiment config must be a JSON object");
    ExperimentConfig c;
    c.env = j.value("env", c.env);
    c.env_config = j.value("env_config", c.env_config);
    c.behavior = j.value("behavior", c.behavior);
    c.transitions = j.value("transitions", c.transitions);
    c.train = j.value("train", c.train);
    BehaviorPolicy::parse(c.behavior);
    TrainConfig::from_json(c.train);
    return c;
  }

  std::unique_ptr<Environment> make_env() const { return make_environment(env, env_config); }
};

inline Json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  try {
    return Json::parse(f);
  } catch (const Json::exception& e) {
    throw DataError(path + ": invalid JSON: " + e.what());
  }
}

inline ExperimentConfig load_experiment(const std::string& path) {
  try {
    return ExperimentConfig::from_json(read_json_file(path));
  } catch (const DataError& e) {
    std::string msg = e.what();
    if (msg.rfind(path, 0) == 0) throw;
    throw DataError(path + ": " + msg);
  }
}

/// Built-in experiment for an environment name.
inline ExperimentConfig default_experiment(const std::string& env) {
  ExperimentConfig c;
  c.env = env;
  if (env == "gridworld") {
    c.env_config = {{"random_start", true}};
    c.behavior = "eps:0.3";
    c.transitions = 10000;
    c.train = {{"algorithm", "dqn"},
               {"epochs", 10},
               {"batch_size", 64},
               {"model", {{"gamma", 0.9}}},
               {"cpe", {{"target_policy", "softmax:0.02"}, {"reward_model", true}}}};
  } else if (env == "cartpole") {
    c.behavior = "uniform";
    c.transitions = 50000;
    c.train = {{"algorithm", "dqn"},
               {"epochs", 24},
               {"batch_size", 64},
               {"model",
                {{"gamma", 0.99},
                 {"double_q", true},
                 {"learning_rate", 1e-4},
                 {"target_update", {{"type", "hard"}, {"every", 1000}}}}},
               {"cpe", {{"target_policy", "softmax:0.5"}, {"reward_model", true}}}};
  } else if (env == "pointmass") {
    c.behavior = "uniform";
    c.transitions = 20000;
    c.train = {{"algorithm", "ddpg"}, {"epochs", 80}, {"batch_size", 64}, {"model", {{"gamma", 0.99}}}};
  } else {
    make_environment(env);
  }
  return c;
}

}  // namespace batchrl
