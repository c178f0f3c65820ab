#include <gtest/gtest.h>

#include <cmath>

#include "batchrl/envs.hpp"

using namespace batchrl;

namespace {

GridworldConfig chain3() {
  GridworldConfig c;
  c.width = 3;
  c.height = 1;
  c.start = 0;
  c.goal = 2;
  return c;
}

}  // namespace

TEST(Gridworld, TwoRightsReachGoal) {
  Gridworld g(chain3());
  std::mt19937_64 rng(0);
  auto s = g.reset(rng);
  auto r1 = g.step(s, g.action_index("right"), rng);
  EXPECT_EQ(r1.reward, 0.0);
  EXPECT_FALSE(r1.terminal);
  auto r2 = g.step(r1.next_state, g.action_index("right"), rng);
  EXPECT_EQ(r2.reward, 1.0);
  EXPECT_TRUE(r2.terminal);
  EXPECT_THROW(g.step(s, 7, rng), DataError);
}

TEST(Gridworld, ValueIterationOracles) {
  Gridworld small(chain3());
  auto vi = value_iteration(small.tabular(), 0.9);
  EXPECT_NEAR(vi.values[0], 0.9, 1e-9);
  EXPECT_EQ(vi.values[2], 0.0);

  Gridworld big;
  auto vi5 = value_iteration(big.tabular(), 0.9, 1e-12);
  EXPECT_NEAR(vi5.values[0], std::pow(0.9, 7), 1e-9);
  EXPECT_LE(vi5.residual, 1e-9);
}

TEST(Gridworld, BellmanResidualWithSlip) {
  GridworldConfig c;
  c.slip = 0.2;
  c.walls = {7, 12, 17};
  Gridworld g(c);
  auto mdp = g.tabular();
  double tol = 1e-8;
  auto vi = value_iteration(mdp, 0.9, tol);
  auto q = q_from_values(mdp, vi.values, 0.9);
  for (int s = 0; s < mdp.num_states; ++s) {
    if (mdp.absorbing[static_cast<std::size_t>(s)]) continue;
    EXPECT_LE(std::abs(q.row(s).maxCoeff() - vi.values[s]), tol);
  }
}

TEST(Gridworld, UnreachableGoalRejected) {
  GridworldConfig c = chain3();
  c.walls = {1};
  EXPECT_THROW(Gridworld{c}, DataError);
}

TEST(Gridworld, PolicyValues) {
  Gridworld g(chain3());
  auto mdp = g.tabular();
  auto vi = value_iteration(mdp, 0.9);
  auto opt = deterministic_policy_table(vi.policy, 4);
  EXPECT_NEAR(true_policy_value(mdp, opt, 0.9, 0), 0.9, 1e-12);

  // Uniform policy on the 1x3 chain: solve the 2-state system by hand.
  // V0 = 0.9 * (0.75 V0 + 0.25 V1), V1 = 0.25 + 0.9 * (0.25 V0 + 0.5 V1)
  Eigen::Matrix2d a;
  a << 1 - 0.9 * 0.75, -0.9 * 0.25, -0.9 * 0.25, 1 - 0.9 * 0.5;
  Eigen::Vector2d b(0.0, 0.25);
  Eigen::Vector2d v = a.inverse() * b;
  Eigen::MatrixXd uni = Eigen::MatrixXd::Constant(3, 4, 0.25);
  EXPECT_NEAR(true_policy_value(mdp, uni, 0.9, 0), v[0], 1e-12);
}

TEST(Gridworld, RolloutAgreesWithDp) {
  GridworldConfig c;
  c.slip = 0.1;
  c.max_steps = 400;
  Gridworld g(c);
  BehaviorPolicy p = BehaviorPolicy::parse("eps:0.3");
  double exact = true_policy_value(g.tabular(), gridworld_policy_table(g, p), 0.9, 0);
  auto mc = true_policy_value(g, p, 100000, 3);
  EXPECT_LE(std::abs(mc.mean_discounted - exact), 3.0 * mc.stderr_discounted);

  BehaviorPolicy greedy = BehaviorPolicy::parse("eps:0");
  Gridworld det;
  double exact_det = true_policy_value(det.tabular(), gridworld_policy_table(det, greedy), 0.9, 0);
  EXPECT_NEAR(true_policy_value(det, greedy, 10, 1).mean_discounted, exact_det, 1e-12);
}

TEST(CartPole, DynamicsOracle) {
  CartPole cp;
  State zero(4, 0.0);
  auto [theta_acc, x_acc] = cp.accelerations(zero, 1);
  double expected = -(10.0 / 1.1) / (0.5 * (4.0 / 3.0 - 0.1 * 1.0 / 1.1));
  EXPECT_NEAR(theta_acc, expected, 1e-12);
  EXPECT_NEAR(theta_acc, -14.63, 0.01);
  (void)x_acc;
}

TEST(CartPole, AlwaysRightFailsAndIsDeterministic) {
  CartPole cp;
  std::mt19937_64 rng(0);
  State s(4, 0.0);
  int t = 0;
  for (; t < cp.max_steps(); ++t) {
    auto r = cp.step(s, 1, rng);
    if (r.terminal) break;
    s = r.next_state;
  }
  EXPECT_LT(t + 1, cp.max_steps());
  BehaviorPolicy u;
  EXPECT_EQ(to_json(generate_logged_data(cp, u, 5, 9).back()).dump(),
            to_json(generate_logged_data(cp, u, 5, 9).back()).dump());
}

TEST(PointMass, Dynamics) {
  PointMass pm;
  std::mt19937_64 rng(0);
  auto r = pm.step_continuous({1.0, 0.0}, {0.0}, rng);
  EXPECT_DOUBLE_EQ(r.next_state[0], 1.0);
  EXPECT_DOUBLE_EQ(r.next_state[1], 0.0);
  EXPECT_DOUBLE_EQ(r.reward, -1.0);
}

TEST(PointMass, LqrBeatsZeroAction) {
  PointMass pm;
  auto lqr = rollout_continuous(pm, [&](const State& s) { return std::vector<double>{pm.oracle_action(s)}; }, 200, 1);
  auto idle = rollout_continuous(pm, [](const State&) { return std::vector<double>{0.0}; }, 200, 1);
  EXPECT_GT(lqr.mean_discounted, idle.mean_discounted);
}

TEST(LoggedData, Propensities) {
  Gridworld g;
  auto rows = generate_logged_data(g, BehaviorPolicy::parse("uniform"), 5, 1);
  for (const auto& r : rows) EXPECT_DOUBLE_EQ(r.action_probability, 0.25);

  auto eps = behavior_propensities(BehaviorPolicy::parse("eps:0.3"), {0.0, 1.0, 0.5, 0.2});
  EXPECT_NEAR(eps[1], 0.775, 1e-15);
  EXPECT_NEAR(eps[0], 0.075, 1e-15);

  auto rows2 = generate_logged_data(g, BehaviorPolicy::parse("softmax:0.5"), 20, 2);
  for (const auto& r : rows2) {
    auto probs = behavior_propensities(BehaviorPolicy::parse("softmax:0.5"),
                                       g.action_scores({static_cast<double>(g.cell_of(r.state_features))}));
    double sum = 0.0;
    for (double p : probs) sum += p;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_EQ(r.action_probability, probs[static_cast<std::size_t>(g.action_index(r.action.name()))]);
    EXPECT_EQ(r.metrics.count("reward"), 1u);
    EXPECT_EQ(r.possible_actions->size(), 4u);
  }
  EXPECT_EQ(rows2.front().mdp_id, "2-0");
}

TEST(LoggedData, Deterministic) {
  Gridworld g;
  auto a = generate_logged_data(g, BehaviorPolicy::parse("eps:0.3"), 100, 5);
  auto b = generate_logged_data(g, BehaviorPolicy::parse("eps:0.3"), 100, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(to_json(a[i]).dump(), to_json(b[i]).dump());
}

TEST(LoggedData, PolicyParsing) {
  EXPECT_THROW(BehaviorPolicy::parse("greedy"), UsageError);
  EXPECT_THROW(BehaviorPolicy::parse("eps:2"), UsageError);
  EXPECT_THROW(BehaviorPolicy::parse("softmax:x"), UsageError);
  PointMass pm;
  EXPECT_THROW(generate_logged_data(pm, BehaviorPolicy::parse("eps:0.1"), 1, 0), UsageError);
  auto rows = generate_logged_data(pm, BehaviorPolicy{}, 2, 0);
  EXPECT_EQ(rows.size(), 100u);
  EXPECT_DOUBLE_EQ(rows[0].action_probability, 0.5);
}

TEST(ChainMdp, Oracle) {
  ChainMdpConfig same;
  same.target_right = same.behavior_right;
  auto o = chain_mdp(same);
  EXPECT_NEAR(o.value_e() / o.value_b(), 1.0, 1e-12);

  auto d = chain_mdp();
  // Q^pi_e consistency: V_e = sum_a pi_e Q_e.
  for (int s = 0; s < 4; ++s) EXPECT_NEAR(d.v_e[s], d.pi_e.row(s).dot(d.q_e.row(s)), 1e-12);
  auto j = d.to_json();
  EXPECT_EQ(j["transitions"].size(), 15u);  // "left" at state 0 has one outcome
  EXPECT_EQ(j["v_target"].size(), 5u);
}

TEST(ChainMdp, RolloutMatchesDp) {
  ChainEnv env;
  auto o = chain_mdp();
  auto mc = rollout(
      env, [](const State&, std::mt19937_64& rng) { return uniform01(rng) < 0.7 ? 1 : 0; }, 100000, 4);
  EXPECT_LE(std::abs(mc.mean_discounted - o.value_e()), 3.0 * mc.stderr_discounted);
}
