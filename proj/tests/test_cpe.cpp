#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "batchrl/cpe.hpp"
#include "batchrl/fixtures.hpp"

using namespace batchrl;

namespace {

EvalStep step(const std::string& id, std::int64_t ord, double r, double pb, std::vector<double> pe, std::size_t a,
              std::vector<double> q) {
  EvalStep s;
  s.mdp_id = id;
  s.ordinal = ord;
  s.values["reward"] = r;
  s.logged_propensity = pb;
  s.target_propensities = std::move(pe);
  s.action = a;
  s.q["reward"] = std::move(q);
  return s;
}

EvalDataset one_step(double r, double pb, std::vector<double> pe, std::size_t a, std::vector<double> q,
                     double gamma = 0.9) {
  return collect_and_sort({step("e", 1, r, pb, std::move(pe), a, std::move(q))}, gamma);
}

/// Random deterministic-match data: propensity 1 logging, target repeats the
/// logged action, arbitrary Q-hat.
EvalDataset random_match(std::uint64_t seed, std::size_t episodes) {
  std::mt19937_64 rng(seed);
  std::vector<EvalStep> samples;
  for (std::size_t e = 0; e < episodes; ++e) {
    std::size_t len = 1 + uniform_index(rng, 12);
    for (std::size_t t = 0; t < len; ++t) {
      std::size_t n = 2 + uniform_index(rng, 3);
      std::size_t a = uniform_index(rng, n);
      std::vector<double> pe(n, 0.0);
      pe[a] = 1.0;
      std::vector<double> q(n);
      for (auto& v : q) v = 5.0 * standard_normal(rng);
      samples.push_back(step("ep" + std::to_string(e), static_cast<std::int64_t>(t + 1), uniform(rng, 0.1, 2.0), 1.0,
                             pe, a, q));
    }
  }
  shuffle_in_place(samples, rng);
  return collect_and_sort(std::move(samples), 0.95);
}

/// Random stochastic-policy data with arbitrary Q-hat.
EvalDataset random_offpolicy(std::uint64_t seed, std::size_t episodes) {
  std::mt19937_64 rng(seed);
  std::vector<EvalStep> samples;
  for (std::size_t e = 0; e < episodes; ++e) {
    std::size_t len = 1 + uniform_index(rng, 8);
    for (std::size_t t = 0; t < len; ++t) {
      double pb = uniform(rng, 0.2, 0.8);
      double pe = uniform(rng, 0.1, 0.9);
      std::size_t a = uniform01(rng) < 0.5 ? 0 : 1;
      double pb_a = a == 0 ? pb : 1.0 - pb;
      samples.push_back(step("ep" + std::to_string(e), static_cast<std::int64_t>(t + 1), uniform(rng, 0.0, 1.0), pb_a,
                             {pe, 1.0 - pe}, a, {standard_normal(rng), standard_normal(rng)}));
    }
  }
  return collect_and_sort(std::move(samples), 0.9);
}

double mean_discounted(const EvalDataset& ds) {
  double total = 0.0;
  for (const auto& ep : ds.episodes) {
    double g = 1.0;
    for (const auto& s : ep.steps) {
      total += g * s.values.at("reward");
      g *= ds.gamma;
    }
  }
  return total / static_cast<double>(ds.size());
}

double mean_step_reward(const EvalDataset& ds) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& ep : ds.episodes) {
    for (const auto& s : ep.steps) {
      total += s.values.at("reward");
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST(CollectAndSort, OrdersEpisodes) {
  std::vector<EvalStep> samples;
  for (const char* id : {"b", "a", "c"}) {
    for (int ord : {3, 1, 2}) samples.push_back(step(id, ord, ord, 1.0, {1.0}, 0, {0.0}));
  }
  auto ds = collect_and_sort(samples, 0.9);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.episodes[0].mdp_id, "a");
  for (const auto& ep : ds.episodes) {
    ASSERT_EQ(ep.steps.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(ep.steps[i].ordinal, static_cast<std::int64_t>(i + 1));
  }
}

TEST(CollectAndSort, SingleStepEpisodes) {
  auto ds = collect_and_sort({step("a", 1, 1, 1, {1}, 0, {0}), step("b", 1, 1, 1, {1}, 0, {0})}, 0.9);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_NEAR(weighted_sequential_dr(ds, "reward").raw, 1.0, 1e-15);
}

TEST(CollectAndSort, Rejections) {
  EXPECT_THROW(collect_and_sort({step("a", 1, 1, 1, {1}, 0, {0}), step("a", 1, 2, 1, {1}, 0, {0})}, 0.9), DataError);
  EXPECT_THROW(collect_and_sort({step("a", 0, 1, 1, {1}, 0, {0})}, 0.9), DataError);
  EXPECT_THROW(collect_and_sort({step("a", 1, 1, 0.0, {1}, 0, {0})}, 0.9), DataError);
  EXPECT_THROW(collect_and_sort({step("a", 1, 1, 1, {0.5, 0.4}, 0, {0, 0})}, 0.9), DataError);
  EXPECT_THROW(collect_and_sort({step("a", 1, 1, 1, {0.5, 0.5}, 0, {0})}, 0.9), DataError);
}

TEST(DirectMethod, Examples) {
  EXPECT_DOUBLE_EQ(direct_method(one_step(1, 1, {0.5, 0.5}, 0, {1, 3}), "reward").raw, 2.0);
  EXPECT_DOUBLE_EQ(direct_method(one_step(1, 1, {0, 1}, 0, {1, 3}), "reward").raw, 3.0);
  EXPECT_EQ(direct_method(one_step(1, 1, {0.5, 0.5}, 0, {0, 0}), "reward").raw, 0.0);
  auto ds = one_step(1, 1, {0.5, 0.5}, 0, {1, 3});
  ds.episodes[0].steps[0].reward_hat["reward"] = {4, 0};
  EXPECT_DOUBLE_EQ(direct_method(ds, "reward").raw, 2.0);
}

TEST(StepwiseIs, Examples) {
  EXPECT_DOUBLE_EQ(stepwise_is(one_step(1, 0.25, {0.5, 0.5}, 0, {0, 0}), "reward").raw, 2.0);
  EXPECT_EQ(stepwise_is(one_step(1, 0.5, {0.0, 1.0}, 0, {0, 0}), "reward").raw, 0.0);
  std::vector<EvalStep> same;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 30; ++i) {
    double p = uniform(rng, 0.1, 0.9);
    std::size_t a = i % 2;
    same.push_back(step("e" + std::to_string(i), 1, uniform(rng, 0, 3), a == 0 ? p : 1 - p, {p, 1 - p}, a, {0, 0}));
  }
  auto ds = collect_and_sort(same, 0.9);
  auto est = stepwise_is(ds, "reward");
  EXPECT_NEAR(est.raw, mean_step_reward(ds), 1e-12);
  EXPECT_NEAR(est.normalized, 1.0, 1e-12);
}

TEST(StepwiseDr, Examples) {
  // rho = 2, r = 1, Q(s, a) = 0.5, V = 0.75.
  auto ds = one_step(1, 0.25, {0.5, 0.5}, 0, {0.5, 1.0});
  EXPECT_DOUBLE_EQ(stepwise_dr(ds, "reward").raw, 1.75);
  auto det = random_match(3, 20);
  EXPECT_NEAR(stepwise_dr(det, "reward").raw, mean_step_reward(det), 1e-12);
}

TEST(SequentialDr, Examples) {
  // V(s0) = 0.6, rho = 2, r = 1, Q(s0, a0) = 0.5.
  auto ds = one_step(1, 0.25, {0.5, 0.5}, 0, {0.5, 0.7});
  EXPECT_NEAR(sequential_dr(ds, "reward").raw, 0.6 + 2.0 * (1.0 - 0.5), 1e-12);

  // Cumulative weights [3, 1] on two one-step episodes -> [0.75, 0.25].
  auto two = collect_and_sort({step("a", 1, 1.0, 0.25, {0.75, 0.25}, 0, {0, 0}),
                               step("b", 1, 5.0, 0.25, {0.75, 0.25}, 1, {0, 0})},
                              0.9);
  EXPECT_NEAR(weighted_sequential_dr(two, "reward").raw, 0.75 * 1.0 + 0.25 * 5.0, 1e-12);
}

TEST(SequentialDr, NoSurvivingEpisodeIsAnError) {
  auto ds = collect_and_sort({step("a", 1, 1.0, 0.5, {0.0, 1.0}, 0, {0, 0})}, 0.9);
  EXPECT_THROW(weighted_sequential_dr(ds, "reward"), DataError);
}

TEST(CpeInvariants, DeterministicMatchIdentity) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto ds = random_match(seed, 25);
    double logged = mean_discounted(ds);
    double per_step = mean_step_reward(ds);
    EXPECT_NEAR(stepwise_is(ds, "reward").raw, per_step, 1e-12);
    EXPECT_NEAR(stepwise_dr(ds, "reward").raw, per_step, 1e-12);
    EXPECT_NEAR(sequential_dr(ds, "reward").raw, logged, 1e-12);
    EXPECT_NEAR(weighted_sequential_dr(ds, "reward").raw, logged, 1e-12);
    EXPECT_NEAR(sequential_dr(ds, "reward").normalized, 1.0, 1e-9);
  }
}

TEST(CpeInvariants, ExactModelIdentityForAllEstimators) {
  auto ds = deterministic_match_dataset();
  for (const auto& e : cpe_report(ds)) EXPECT_NEAR(e.normalized, 1.0, 1e-9) << e.estimator;
}

TEST(CpeInvariants, ZeroModelCollapses) {
  auto ds = random_offpolicy(4, 40);
  for (auto& ep : ds.episodes) {
    for (auto& s : ep.steps) s.q["reward"] = {0.0, 0.0};
  }
  EXPECT_NEAR(stepwise_dr(ds, "reward").raw, stepwise_is(ds, "reward").raw, 1e-12);
  auto per = sequential_dr_episodes(ds, "reward");
  for (std::size_t e = 0; e < ds.size(); ++e) {
    double w = 1.0, g = 1.0, ret = 0.0;
    for (const auto& s : ds.episodes[e].steps) {
      w *= s.target_propensities[s.action] / s.logged_propensity;
      ret += g * w * s.values.at("reward");
      g *= ds.gamma;
    }
    EXPECT_NEAR(per[e], ret, 1e-12);
  }
}

TEST(CpeInvariants, EpisodeOrderDoesNotMatter) {
  auto ds = random_offpolicy(6, 30);
  auto rev = ds;
  std::reverse(rev.episodes.begin(), rev.episodes.end());
  auto a = cpe_report(ds);
  auto b = cpe_report(rev);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].raw, b[i].raw) << a[i].estimator;
}

TEST(Magic, EqualReturnsGiveThatValue) {
  // Deterministic-match data with exact Q: every j-step return equals the
  // logged discounted return.
  auto ds = deterministic_match_dataset();
  MagicDetail d;
  auto est = magic(ds, "reward", {}, &d);
  for (double g : d.g) EXPECT_NEAR(g, d.g.back(), 1e-12);
  EXPECT_NEAR(est.raw, d.g.back(), 1e-12);
}

TEST(Magic, BiasDefinition) {
  EXPECT_NEAR(interval_distance(1.3, 0.9, 1.1), 0.2, 1e-15);
  EXPECT_EQ(interval_distance(1.0, 0.9, 1.1), 0.0);
  EXPECT_NEAR(interval_distance(0.5, 0.9, 1.1), 0.4, 1e-15);
}

TEST(Magic, ConvexCombinationOfReturns) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto ds = random_offpolicy(10 + seed, 60);
    MagicDetail d;
    CpeOptions opt;
    opt.seed = seed;
    auto est = magic(ds, "reward", opt, &d);
    double lo = *std::min_element(d.g.begin(), d.g.end());
    double hi = *std::max_element(d.g.begin(), d.g.end());
    EXPECT_GE(est.raw, lo - 1e-12);
    EXPECT_LE(est.raw, hi + 1e-12);
    EXPECT_NEAR(std::accumulate(d.weights.begin(), d.weights.end(), 0.0), 1.0, 1e-9);
    EXPECT_EQ(d.j.front(), -1);
    EXPECT_NEAR(d.g.back(), weighted_sequential_dr(ds, "reward").raw, 1e-12);
  }
}

TEST(Magic, RejectsBadTruncationSets) {
  auto ds = random_offpolicy(3, 10);
  CpeOptions opt;
  opt.magic_j = {-1};
  EXPECT_THROW(magic(ds, "reward", opt), DataError);
  opt.magic_j = {0, 1};
  EXPECT_THROW(magic(ds, "reward", opt), DataError);
}

TEST(Magic, SimplexQpMatchesGridSearch) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    int k = 2 + static_cast<int>(uniform_index(rng, 2));
    Eigen::MatrixXd a(k, k);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = standard_normal(rng);
    Eigen::MatrixXd m = a * a.transpose() + 1e-3 * Eigen::MatrixXd::Identity(k, k);
    Eigen::VectorXd x = simplex_qp(m, 5000);
    double best = std::numeric_limits<double>::infinity();
    const int steps = 400;
    for (int i = 0; i <= steps; ++i) {
      for (int j = 0; j <= (k == 3 ? steps - i : 0); ++j) {
        Eigen::VectorXd y(k);
        if (k == 2) {
          y << i / double(steps), 1 - i / double(steps);
        } else {
          y << i / double(steps), j / double(steps), 1 - (i + j) / double(steps);
        }
        best = std::min(best, y.dot(m * y));
      }
    }
    EXPECT_LE(x.dot(m * x), best + 1e-6);
    EXPECT_NEAR(x.sum(), 1.0, 1e-12);
    EXPECT_GE(x.minCoeff(), 0.0);
  }
}

TEST(CpeReport, Cardinality) {
  auto ds = random_offpolicy(2, 20);
  for (auto& ep : ds.episodes) {
    for (auto& s : ep.steps) {
      s.values["clicks"] = s.values["reward"] * 2;
      s.values["time"] = 1.0;
      s.q["clicks"] = s.q["reward"];
      s.q["time"] = s.q["reward"];
    }
  }
  auto report = cpe_report(ds);
  EXPECT_EQ(report.size(), 18u);
  auto j = to_json(report[0], 3);
  EXPECT_EQ(j["epoch"], 3);
  EXPECT_TRUE(j.contains("normalized"));
}

TEST(CpeReport, NormalizedExample) {
  CpeEstimate e = cpe_detail::make("x", "m", 1.5, 1.0);
  EXPECT_DOUBLE_EQ(e.normalized, 1.5);
  EXPECT_TRUE(std::isnan(cpe_detail::make("x", "m", 1.5, 0.0).normalized));
}

TEST(CpeChain, AccurateOnModerateData) {
  auto o = chain_mdp();
  auto ds = chain_eval_dataset(o, 4000, 1, &o.q_e);
  double truth = o.value_e();
  EXPECT_NEAR(weighted_sequential_dr(ds, "reward").raw / truth, 1.0, 0.05);
  EXPECT_NEAR(magic(ds, "reward").raw / truth, 1.0, 0.05);
  EXPECT_NEAR(sequential_dr(ds, "reward").raw / truth, 1.0, 0.05);
}

TEST(CpeChain, RhoCap) {
  auto ds = one_step(1, 1e-6, {0.5, 0.5}, 0, {0, 0});
  CpeOptions opt;
  opt.rho_cap = 1e4;
  EXPECT_DOUBLE_EQ(stepwise_is(ds, "reward", opt).raw, 1e4);
  opt.rho_cap = 0.0;
  EXPECT_DOUBLE_EQ(stepwise_is(ds, "reward", opt).raw, 5e5);
}
