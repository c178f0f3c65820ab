#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "batchrl/normalization.hpp"

using namespace batchrl;

namespace {

std::vector<double> lognormal(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> xs(n);
  for (auto& x : xs) x = std::exp(standard_normal(rng));
  return xs;
}

// Independent Box-Cox profile likelihood, evaluated on a fine grid.
double grid_boxcox_lambda(const std::vector<double>& xs) {
  double best_lam = 0.0;
  double best = -1e300;
  double sum_log = 0.0;
  for (double x : xs) sum_log += std::log(x);
  for (int i = -200; i <= 200; ++i) {
    double lam = i * 0.01;
    double mean = 0.0;
    std::vector<double> t(xs.size());
    for (std::size_t j = 0; j < xs.size(); ++j) {
      t[j] = i == 0 ? std::log(xs[j]) : (std::pow(xs[j], lam) - 1.0) / lam;
      mean += t[j];
    }
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double v : t) var += (v - mean) * (v - mean);
    var /= static_cast<double>(xs.size());
    double ll = -0.5 * static_cast<double>(xs.size()) * std::log(var) + (lam - 1.0) * sum_log;
    if (ll > best) {
      best = ll;
      best_lam = lam;
    }
  }
  return best_lam;
}

std::pair<double, double> transformed_moments(const std::vector<double>& xs, const NormalizationSpec& s) {
  double sum = 0.0;
  for (double x : xs) sum += apply_spec(x, s)[0];
  double mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) {
    double d = apply_spec(x, s)[0] - mean;
    ss += d * d;
  }
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

}  // namespace

TEST(Identify, Cascade) {
  std::mt19937_64 rng(1);
  std::vector<double> binary(500), prob(1000), enums(1000), normal(2000), cauchy(2000);
  for (auto& x : binary) x = uniform01(rng) < 0.3 ? 1.0 : 0.0;
  for (auto& x : prob) x = uniform01(rng);
  for (auto& x : enums) x = static_cast<double>(uniform_index(rng, 5));
  for (auto& x : normal) x = 5.0 + 2.0 * standard_normal(rng);
  for (auto& x : cauchy) x = std::tan(3.14159265358979 * (uniform01(rng) - 0.5));
  EXPECT_EQ(identify_feature(binary), FeatureKind::Binary);
  EXPECT_EQ(identify_feature(prob), FeatureKind::Probability);
  EXPECT_EQ(identify_feature(enums), FeatureKind::Enum);
  EXPECT_EQ(identify_feature(lognormal(2000, 2)), FeatureKind::BoxCox);
  EXPECT_EQ(identify_feature(cauchy), FeatureKind::Quantile);
  EXPECT_EQ(identify_feature(normal), FeatureKind::Continuous);
}

TEST(Identify, TooFewSamples) {
  std::vector<double> xs(50, 1.0);
  try {
    identify_feature(xs);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("override"), std::string::npos);
  }
}

TEST(FitSpec, ContinuousClosedForm) {
  auto s = fit_spec({1, 2, 3}, FeatureKind::Continuous);
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.stddev, 1.0);
  EXPECT_DOUBLE_EQ(apply_spec(3.0, s)[0], 1.0);
}

TEST(FitSpec, EnumSorted) {
  auto s = fit_spec({3, 7, 3, 9}, FeatureKind::Enum);
  EXPECT_EQ(s.enum_values, (std::vector<double>{3, 7, 9}));
  auto seen = apply_spec(7, s);
  EXPECT_EQ(seen, (std::vector<double>{0, 1, 0}));
  EXPECT_EQ(apply_spec(4, s), (std::vector<double>{0, 0, 0}));
}

TEST(FitSpec, BoxCoxMatchesGridOracle) {
  auto xs = lognormal(10000, 3);
  auto s = fit_spec(xs, FeatureKind::BoxCox);
  double oracle = grid_boxcox_lambda(xs);
  EXPECT_NEAR(s.lambda, 0.0, 0.1);
  EXPECT_NEAR(s.lambda, oracle, 0.011);
}

TEST(FitSpec, BoxCoxFallsBackOnNonPositive) {
  std::vector<double> xs{-1.0, 0.0, 1.0, 5.0, 50.0};
  auto s = fit_spec(xs, FeatureKind::BoxCox);
  EXPECT_EQ(s.kind, FeatureKind::Continuous);
}

TEST(ApplySpec, Examples) {
  NormalizationSpec p;
  p.kind = FeatureKind::Probability;
  EXPECT_DOUBLE_EQ(apply_spec(0.5, p)[0], 0.0);
  EXPECT_DOUBLE_EQ(apply_spec(0.0, p)[0], -6.0);
  EXPECT_DOUBLE_EQ(apply_spec(1.0, p)[0], 6.0);

  std::mt19937_64 rng(4);
  std::vector<double> xs(1001);
  for (auto& x : xs) x = standard_normal(rng);
  auto q = fit_spec(xs, FeatureKind::Quantile);
  std::vector<double> sorted(xs);
  std::sort(sorted.begin(), sorted.end());
  EXPECT_NEAR(apply_spec(sorted[500], q)[0], 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(apply_spec(1e9, q)[0], 3.0);
  EXPECT_DOUBLE_EQ(apply_spec(-1e9, q)[0], -3.0);
}

TEST(ApplySpec, AlwaysFinite) {
  std::mt19937_64 rng(5);
  auto bc = fit_spec(lognormal(1000, 6), FeatureKind::BoxCox);
  auto fallback = fit_spec({-3, -1, 0, 2, 9}, FeatureKind::BoxCox);
  NormalizationSpec prob;
  prob.kind = FeatureKind::Probability;
  std::vector<double> heavy(1000);
  for (auto& x : heavy) x = std::tan(3.14159265358979 * (uniform01(rng) - 0.5));
  auto q = fit_spec(heavy, FeatureKind::Quantile);
  std::vector<double> probes{-1e300, -1e6, -1, 0, 1e-300, 0.5, 1, 1e6, 1e300};
  for (const auto* s : {&bc, &fallback, &prob, &q}) {
    for (double v : probes) EXPECT_TRUE(std::isfinite(apply_spec(v, *s)[0])) << kind_name(s->kind) << " " << v;
  }
}

TEST(ApplySpec, Effectiveness) {
  std::mt19937_64 rng(7);
  std::vector<double> normal(5000), uni(5000), cauchy(5000);
  for (auto& x : normal) x = 100.0 + 15.0 * standard_normal(rng);
  for (auto& x : uni) x = uniform01(rng);
  for (auto& x : cauchy) x = std::tan(3.14159265358979 * (uniform01(rng) - 0.5));
  std::vector<std::pair<std::vector<double>, FeatureKind>> cases{
      {normal, FeatureKind::Continuous},
      {lognormal(5000, 8), FeatureKind::BoxCox},
      {cauchy, FeatureKind::Quantile},
      {uni, FeatureKind::Probability}};
  for (const auto& [xs, kind] : cases) {
    auto s = fit_spec(xs, kind);
    auto [mean, sd] = transformed_moments(xs, s);
    EXPECT_LE(std::abs(mean), 0.1) << kind_name(kind);
    EXPECT_GE(sd, 0.5) << kind_name(kind);
    EXPECT_LE(sd, 2.0) << kind_name(kind);
  }
}

TEST(Preprocessor, LayoutAndMissing) {
  NormalizationSpec f1;
  f1.feature_id = "f1";
  f1.kind = FeatureKind::Continuous;
  f1.mean = 2;
  f1.stddev = 1;
  NormalizationSpec f2;
  f2.feature_id = "f2";
  f2.kind = FeatureKind::Enum;
  f2.enum_values = {1, 2, 3};
  Preprocessor pp({f1, f2});
  EXPECT_EQ(pp.width(), 4u);
  EXPECT_EQ(pp.layout().at("f1").offset, 0u);
  EXPECT_EQ(pp.layout().at("f2").offset, 1u);
  EXPECT_EQ(pp.layout().at("f2").width, 3u);
  auto row = pp.transform({{"f2", 2.0}});
  EXPECT_EQ(row[0], 0.0);
  EXPECT_EQ(row[2], 1.0);
  EXPECT_THROW(Preprocessor({f1, f1}), DataError);
}

TEST(Preprocessor, BatchBitIdenticalToRows) {
  std::mt19937_64 rng(9);
  std::vector<FeatureMap> rows(400);
  for (auto& r : rows) {
    r["bin"] = uniform01(rng) < 0.5 ? 1.0 : 0.0;
    r["prob"] = uniform01(rng);
    r["cont"] = standard_normal(rng) * 3.0;
    r["enum"] = static_cast<double>(uniform_index(rng, 4));
    r["heavy"] = std::tan(3.1415926 * (uniform01(rng) - 0.5));
    r["skew"] = std::exp(standard_normal(rng));
    if (uniform01(rng) < 0.1) r.erase("cont");
  }
  std::vector<const FeatureMap*> ptrs;
  for (const auto& r : rows) ptrs.push_back(&r);
  Preprocessor pp(fit_normalization(ptrs));
  Eigen::MatrixXd batch = pp.transform_batch(rows);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Eigen::RowVectorXd single = pp.transform(rows[i]);
    ASSERT_EQ(std::memcmp(single.data(), Eigen::RowVectorXd(batch.row(static_cast<Eigen::Index>(i))).data(),
                          sizeof(double) * pp.width()),
              0);
  }
}

TEST(Preprocessor, JsonRoundTripAndDigest) {
  std::mt19937_64 rng(10);
  std::vector<FeatureMap> rows(300);
  for (auto& r : rows) {
    r["a"] = standard_normal(rng);
    r["b"] = static_cast<double>(uniform_index(rng, 3));
    r["c"] = std::exp(standard_normal(rng));
  }
  std::vector<const FeatureMap*> ptrs;
  for (const auto& r : rows) ptrs.push_back(&r);
  auto specs = fit_normalization(ptrs);
  auto back = specs_from_json(Json::parse(specs_to_json(specs).dump()));
  EXPECT_EQ(specs_digest(back), specs_digest(specs));
  Preprocessor p1(specs), p2(back);
  for (const auto& r : rows) EXPECT_EQ(p1.transform(r), p2.transform(r));
}

TEST(Preprocessor, OverridePinsKind) {
  std::vector<FeatureMap> rows(20);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i]["x"] = static_cast<double>(i);
  std::vector<const FeatureMap*> ptrs;
  for (const auto& r : rows) ptrs.push_back(&r);
  EXPECT_THROW(fit_normalization(ptrs), DataError);
  auto specs = fit_normalization(ptrs, {}, {{"x", FeatureKind::Continuous}});
  EXPECT_EQ(specs[0].kind, FeatureKind::Continuous);
}
