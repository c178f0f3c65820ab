#pragma once

// Evaluation datasets with known ground truth, shared by the test suites
// and the acceptance runner.

#include <string>
#include <vector>

#include "batchrl/cpe.hpp"
#include "batchrl/envs.hpp"

namespace batchrl {

/// Episodes of the chain fixture logged by pi_b, with Q-hat taken from `q`
/// (states x actions) or zero when `q` is null. Series "reward".
inline EvalDataset chain_eval_dataset(const ChainOracle& o, std::size_t episodes, std::uint64_t seed,
                                      const Eigen::MatrixXd* q) {
  ChainEnv env(o.config);
  std::vector<EvalEpisode> eps(episodes);
  parallel_for(episodes, [&](std::size_t e) {
    std::mt19937_64 rng(derive_seed(seed, e));
    State s = env.reset(rng);
    EvalEpisode ep;
    ep.mdp_id = std::to_string(e);
    for (int t = 0; t < env.max_steps(); ++t) {
      int cell = static_cast<int>(s[0]);
      int a = uniform01(rng) < o.pi_b(cell, 1) ? 1 : 0;
      auto res = env.step(s, a, rng);
      EvalStep st;
      st.mdp_id = ep.mdp_id;
      st.ordinal = t + 1;
      st.action = static_cast<std::size_t>(a);
      st.logged_propensity = o.pi_b(cell, a);
      st.target_propensities = {o.pi_e(cell, 0), o.pi_e(cell, 1)};
      st.values["reward"] = res.reward;
      st.q["reward"] = q != nullptr ? std::vector<double>{(*q)(cell, 0), (*q)(cell, 1)} : std::vector<double>{0.0, 0.0};
      st.terminal = res.terminal;
      ep.steps.push_back(std::move(st));
      if (res.terminal) break;
      s = res.next_state;
    }
    eps[e] = std::move(ep);
  });
  EvalDataset ds;
  ds.gamma = o.config.gamma;
  ds.episodes = std::move(eps);
  return ds;
}

/// Deterministic gridworld logged by its optimal policy from every open
/// start cell with propensity 1; the target policy repeats the logged
/// actions. Q-hat is the exact Q* and the reward model is exact.
inline EvalDataset deterministic_match_dataset(const GridworldConfig& cfg = {}) {
  Gridworld g(cfg);
  auto qstar = g.q_star();
  auto vi = value_iteration(g.tabular(), cfg.gamma);
  std::mt19937_64 rng(0);
  EvalDataset ds;
  ds.gamma = cfg.gamma;
  for (int start = 0; start < g.cells(); ++start) {
    if (g.is_wall(start) || start == g.config().goal) continue;
    EvalEpisode ep;
    ep.mdp_id = "start-" + std::to_string(start);
    State s{static_cast<double>(start)};
    for (int t = 0; t < g.max_steps(); ++t) {
      int cell = static_cast<int>(s[0]);
      int a = vi.policy[static_cast<std::size_t>(cell)];
      auto res = g.step(s, a, rng);
      EvalStep st;
      st.mdp_id = ep.mdp_id;
      st.ordinal = t + 1;
      st.action = static_cast<std::size_t>(a);
      st.logged_propensity = 1.0;
      st.target_propensities.assign(4, 0.0);
      st.target_propensities[static_cast<std::size_t>(a)] = 1.0;
      st.values["reward"] = res.reward;
      std::vector<double> q(4), rhat(4);
      for (int b = 0; b < 4; ++b) {
        q[static_cast<std::size_t>(b)] = qstar(cell, b);
        rhat[static_cast<std::size_t>(b)] = g.move(cell, b) == g.config().goal ? cfg.goal_reward : cfg.step_reward;
      }
      st.q["reward"] = q;
      st.reward_hat["reward"] = rhat;
      st.terminal = res.terminal;
      ep.steps.push_back(std::move(st));
      if (res.terminal) break;
      s = res.next_state;
    }
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

}  // namespace batchrl
