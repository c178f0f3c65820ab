#include <gtest/gtest.h>

#include <cmath>

#include "batchrl/understanding.hpp"

using namespace batchrl;

namespace {

ModelInputs prepare(const std::vector<JoinedTransition>& ts) {
  std::vector<const FeatureMap*> states;
  for (const auto& t : ts) states.push_back(&t.state_features);
  NormalizationConfig nc;
  nc.min_samples = 1;
  Preprocessor pp(fit_normalization(states, nc));
  auto space = ActionSpace::infer(ts, ActionSpace::Kind::Continuous);
  return build_model_inputs(ts, pp, nullptr, space, {{"reward", 1.0}});
}

EnvModelConfig quick_config() {
  EnvModelConfig c;
  c.k = 2;
  c.epochs = 20;
  c.learning_rate = 3e-3;
  c.hidden = {32, 32};
  c.batch_size = 64;
  c.seed = 11;
  return c;
}

/// One state column s ~ U(-1, 1), two actions a in {0, 1} one-hot,
/// s' = s + a + e where e is an equal mixture of N(-2, 0.5^2) and N(2, 0.5^2).
ModelInputs mixture_inputs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelInputs m;
  const auto rows = static_cast<Eigen::Index>(n);
  m.states = Matrix(rows, 1);
  m.actions = Matrix::Zero(rows, 2);
  m.next_states = Matrix(rows, 1);
  m.rewards = Vector::Zero(rows);
  m.has_next.assign(n, 1);
  m.state_columns = {"s"};
  m.action_columns = {kActionBlock, kActionBlock};
  for (std::size_t i = 0; i < n; ++i) {
    auto r = static_cast<Eigen::Index>(i);
    double s = uniform(rng, -1.0, 1.0);
    int a = uniform01(rng) < 0.5 ? 1 : 0;
    double e = (uniform01(rng) < 0.5 ? -2.0 : 2.0) + 0.5 * standard_normal(rng);
    m.states(r, 0) = s;
    m.actions(r, a) = 1.0;
    m.next_states(r, 0) = s + a + e;
    m.mdp_ids.push_back("m" + std::to_string(i));
    m.possible.push_back({0, 1});
  }
  return m;
}

/// Entropy of the equal two-component mixture, by numerical integration.
double mixture_entropy() {
  auto pdf = [](double x) {
    auto n = [](double z, double mu) { return std::exp(-0.5 * std::pow((z - mu) / 0.5, 2)) / (0.5 * std::sqrt(2 * M_PI)); };
    return 0.5 * n(x, -2.0) + 0.5 * n(x, 2.0);
  };
  double h = 0.0;
  const double dx = 1e-4;
  for (double x = -8.0; x <= 8.0; x += dx) {
    double p = pdf(x);
    if (p > 0) h -= p * std::log(p) * dx;
  }
  return h;
}

}  // namespace

TEST(BuildModelInputs, OneHotAndPossibleActions) {
  auto ts = synthetic_transitions(SyntheticKind::TrueMdp, 3, 4, 1);
  auto m = prepare(ts);
  EXPECT_EQ(m.size(), 12u);
  EXPECT_EQ(m.action_count(), 2);
  EXPECT_TRUE(m.discrete);
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_DOUBLE_EQ(m.actions.row(static_cast<Eigen::Index>(i)).sum(), 1.0);
    EXPECT_EQ(m.possible[i].size(), 2u);
  }
  int terminal = 0;
  for (auto h : m.has_next) terminal += h ? 0 : 1;
  EXPECT_EQ(terminal, 3);
}

TEST(EnvModel, MixtureRecoversTrueNll) {
  auto m = mixture_inputs(6000, 3);
  auto cfg = quick_config();
  cfg.epochs = 40;
  const double truth = mixture_entropy();
  EXPECT_NEAR(truth, std::log(2.0) + 0.5 * std::log(2 * M_PI * M_E * 0.25), 1e-3);
  auto two = fit_env_model(m, FitTarget::NextState, cfg);
  EXPECT_TRUE(two.converged);
  EXPECT_NEAR(two.heldout_nll, truth, 0.05 * truth);
  cfg.k = 1;
  auto one = fit_env_model(m, FitTarget::NextState, cfg);
  // A single Gaussian cannot represent the bimodal noise.
  EXPECT_GT(one.heldout_nll, two.heldout_nll + 0.2);
}

TEST(EnvModel, HeldOutRowsAreWholeEpisodes) {
  auto ts = synthetic_transitions(SyntheticKind::TrueMdp, 20, 5, 2);
  auto m = prepare(ts);
  auto cfg = quick_config();
  cfg.epochs = 1;
  auto model = fit_env_model(m, FitTarget::Reward, cfg);
  std::set<std::string> train, held;
  for (auto r : model.train_rows) train.insert(m.mdp_ids[r]);
  for (auto r : model.eval_rows) held.insert(m.mdp_ids[r]);
  EXPECT_EQ(held.size(), 4u);
  for (const auto& id : held) EXPECT_FALSE(train.contains(id));
  EXPECT_EQ(model.train_rows.size() + model.eval_rows.size(), m.size());
}

TEST(EnvModel, DeterministicForSeed) {
  auto ts = synthetic_transitions(SyntheticKind::TrueMdp, 10, 5, 2);
  auto m = prepare(ts);
  auto cfg = quick_config();
  cfg.epochs = 3;
  auto a = fit_env_model(m, FitTarget::NextState, cfg);
  auto b = fit_env_model(m, FitTarget::NextState, cfg);
  EXPECT_EQ(a.heldout_nll, b.heldout_nll);
  EXPECT_TRUE(a.net.params() == b.net.params());
}

TEST(FeatureImportance, ConstantFeatureIsExactlyZero) {
  auto ts = synthetic_transitions(SyntheticKind::TrueMdp, 30, 10, 4);
  for (auto& t : ts) {
    t.state_features["const"] = 0.3;
    if (t.next_state_features) (*t.next_state_features)["const"] = 0.3;
  }
  auto m = prepare(ts);
  auto cfg = quick_config();
  cfg.epochs = 3;
  auto model = fit_env_model(m, FitTarget::NextState, cfg);
  auto imp = feature_importance(model, m);
  ASSERT_TRUE(imp.contains("const"));
  EXPECT_EQ(imp.at("const"), 0.0);
  EXPECT_TRUE(imp.contains("action:action"));
}

TEST(FeatureImportance, SignalOutranksNoise) {
  auto ts = synthetic_transitions(SyntheticKind::TrueMdp, 200, 20, 5);
  auto m = prepare(ts);
  auto model = fit_env_model(m, FitTarget::Reward, quick_config());
  auto imp = feature_importance(model, m);
  EXPECT_GT(imp.at("x"), 0.5);
  EXPECT_GT(imp.at("x"), 5.0 * std::max(imp.at("noise"), 1e-3));
}

TEST(ActionDependence, ContinuousNeedsSamples) {
  auto m = mixture_inputs(200, 1);
  m.discrete = false;
  auto cfg = quick_config();
  cfg.epochs = 1;
  auto model = fit_env_model(m, FitTarget::NextState, cfg);
  EXPECT_THROW(action_dependence(model, m, 0), DataError);
  auto dep = action_dependence(model, m, 4, 1);
  EXPECT_TRUE(dep.contains("s"));
  auto reward = fit_env_model(m, FitTarget::Reward, cfg);
  EXPECT_THROW(action_dependence(reward, m), DataError);
}

TEST(Verdicts, FollowThresholds) {
  DataHealthReport rep;
  rep.transition_importance = {{"x", 0.5}, {"action:action", 0.2}};
  rep.reward_importance = {{"x", 0.3}, {"action:action", 0.0}};
  rep.dependence = {{"x", 0.05}};
  apply_verdicts(rep);
  EXPECT_TRUE(rep.transitions_predictable);
  EXPECT_FALSE(rep.reward_state_action_link);
  EXPECT_NE(rep.reward_explanation.find("bandit"), std::string::npos);
  rep.dependence["x"] = 0.2;
  apply_verdicts(rep);
  EXPECT_TRUE(rep.reward_state_action_link);
  rep.transition_importance["action:action"] = 0.01;  // not strictly above
  apply_verdicts(rep);
  EXPECT_FALSE(rep.transitions_predictable);
  EXPECT_NE(rep.transitions_explanation.find("action"), std::string::npos);
  auto j = rep.to_json();
  EXPECT_EQ(j.at("verdicts").at("transitions_predictable"), false);
  EXPECT_EQ(j.at("transition_importance").at(0).at("feature"), "x");
}

TEST(RunChecks, ClassifiesSyntheticData) {
  auto cfg = quick_config();
  struct Case {
    SyntheticKind kind;
    bool transitions;
    bool link;
  };
  for (const auto& c : {Case{SyntheticKind::TrueMdp, true, true}, Case{SyntheticKind::ContextualBandit, false, false},
                        Case{SyntheticKind::StateFreeReward, true, false}}) {
    auto m = prepare(synthetic_transitions(c.kind, 200, 20, 9));
    auto rep = run_checks(m, cfg);
    EXPECT_EQ(rep.transitions_predictable, c.transitions) << static_cast<int>(c.kind) << " " << rep.transitions_explanation;
    EXPECT_EQ(rep.reward_state_action_link, c.link) << static_cast<int>(c.kind) << " " << rep.reward_explanation;
  }
}
