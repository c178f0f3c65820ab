#pragma once

// Counterfactual policy evaluation: rebuild ordered episodes from collected
// samples and compute the six off-policy estimators per reward series.

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "batchrl/common.hpp"

namespace batchrl {

/// Name of the shaped-reward series in a CPE report.
inline constexpr const char* kShapedReward = "shaped_reward";

struct EvalStep {
  std::string mdp_id;
  std::int64_t ordinal = 0;
  std::size_t action = 0;  // index of the logged action among the possible actions
  double logged_propensity = 1.0;
  std::vector<double> target_propensities;
  FeatureMap values;                                       // series -> observed reward
  std::map<std::string, std::vector<double>> q;           // series -> Q-hat per action
  std::map<std::string, std::vector<double>> reward_hat;  // series -> r-hat per action (optional)
  bool terminal = false;
};

struct EvalEpisode {
  std::string mdp_id;
  std::vector<EvalStep> steps;
};

struct EvalDataset {
  std::vector<EvalEpisode> episodes;
  double gamma = 0.9;

  std::size_t size() const { return episodes.size(); }
  std::vector<std::string> series() const {
    std::set<std::string> names;
    for (const auto& ep : episodes) {
      for (const auto& s : ep.steps) {
        for (const auto& [k, v] : s.values) names.insert(k);
      }
    }
    return {names.begin(), names.end()};
  }
};

struct CpeEstimate {
  std::string estimator;
  std::string metric;
  double raw = 0.0;
  double normalized = 0.0;
  double logged = 0.0;
};

inline Json to_json(const CpeEstimate& e, std::int64_t epoch) {
  auto num = [](double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); };
  return {{"epoch", epoch}, {"metric", e.metric}, {"estimator", e.estimator}, {"raw", num(e.raw)},
          {"normalized", num(e.normalized)}};
}

struct CpeOptions {
  double rho_cap = 1e4;  // <= 0 disables the cap
  int bootstrap_samples = 200;
  double ci_low = 0.05;
  double ci_high = 0.95;
  double ridge = 1e-8;
  int qp_iterations = 500;
  std::uint64_t seed = 0;
  std::vector<int> magic_j;  // empty: geometric default

  Json to_json() const {
    return {{"rho_cap", rho_cap},  {"bootstrap_samples", bootstrap_samples}, {"ci_low", ci_low},
            {"ci_high", ci_high},  {"ridge", ridge}, {"qp_iterations", qp_iterations}, {"seed", seed}};
  }
  static CpeOptions from_json(const Json& j) {
    CpeOptions o;
    o.rho_cap = j.value("rho_cap", o.rho_cap);
    o.bootstrap_samples = j.value("bootstrap_samples", o.bootstrap_samples);
    o.ci_low = j.value("ci_low", o.ci_low);
    o.ci_high = j.value("ci_high", o.ci_high);
    o.ridge = j.value("ridge", o.ridge);
    o.qp_iterations = j.value("qp_iterations", o.qp_iterations);
    o.seed = j.value("seed", o.seed);
    o.magic_j = j.value("magic_j", o.magic_j);
    if (o.bootstrap_samples < 2) throw DataError("bootstrap_samples must be >= 2");
    if (!(o.ci_low >= 0.0 && o.ci_low < o.ci_high && o.ci_high <= 1.0)) throw DataError("invalid CI percentiles");
    return o;
  }
};

/// Groups samples by mdp_id (sorted) and orders each episode by ordinal.
inline EvalDataset collect_and_sort(std::vector<EvalStep> samples, double gamma) {
  std::map<std::string, std::vector<EvalStep>> groups;
  for (auto& s : samples) {
    if (s.ordinal < 1) throw DataError("sample of mdp_id " + s.mdp_id + " has no ordinal");
    if (!(s.logged_propensity > 0.0 && s.logged_propensity <= 1.0)) {
      throw DataError("logged propensity must be in (0, 1] (mdp_id " + s.mdp_id + ")");
    }
    double sum = 0.0;
    for (double p : s.target_propensities) sum += p;
    if (s.target_propensities.empty() || std::abs(sum - 1.0) > 1e-6) {
      throw DataError("target propensities must sum to 1 (mdp_id " + s.mdp_id + ")");
    }
    if (s.action >= s.target_propensities.size()) throw DataError("logged action index out of range");
    for (const auto& [k, q] : s.q) {
      if (q.size() != s.target_propensities.size()) throw DataError("Q-hat must cover every possible action");
    }
    groups[s.mdp_id].push_back(std::move(s));
  }
  EvalDataset ds;
  ds.gamma = gamma;
  for (auto& [id, steps] : groups) {
    std::sort(steps.begin(), steps.end(), [](const EvalStep& a, const EvalStep& b) { return a.ordinal < b.ordinal; });
    for (std::size_t i = 1; i < steps.size(); ++i) {
      if (steps[i].ordinal == steps[i - 1].ordinal) {
        throw DataError("duplicate sample (" + id + ", " + std::to_string(steps[i].ordinal) + ")");
      }
    }
    ds.episodes.push_back({id, std::move(steps)});
  }
  return ds;
}

namespace cpe_detail {

/// One series of one episode, flattened.
struct Track {
  std::vector<double> rho, r, q_logged, v_hat, v_reward;
};

struct Series {
  std::vector<Track> episodes;
  std::size_t capped = 0;
  std::size_t horizon = 0;
  std::size_t steps = 0;
};

/// Linear-interpolation percentile of sorted data.
inline double sorted_percentile(const std::vector<double>& sorted, double p) {
  double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  auto lo = static_cast<std::size_t>(std::floor(h));
  std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Flattens one series in canonical (mdp_id) episode order.
inline Series prepare(const EvalDataset& ds, const std::string& series, const CpeOptions& opt) {
  if (ds.episodes.empty()) throw DataError("CPE needs at least one episode");
  std::vector<const EvalEpisode*> order;
  for (const auto& ep : ds.episodes) order.push_back(&ep);
  std::sort(order.begin(), order.end(), [](const EvalEpisode* a, const EvalEpisode* b) { return a->mdp_id < b->mdp_id; });
  Series out;
  for (const EvalEpisode* ep : order) {
    Track t;
    for (const auto& s : ep->steps) {
      if (!(s.logged_propensity > 0.0)) throw DataError("logged propensity is 0 in mdp_id " + ep->mdp_id);
      double rho = s.target_propensities.at(s.action) / s.logged_propensity;
      if (opt.rho_cap > 0.0 && rho > opt.rho_cap) {
        rho = opt.rho_cap;
        ++out.capped;
      }
      auto v = s.values.find(series);
      if (v == s.values.end()) throw DataError("series '" + series + "' missing in mdp_id " + ep->mdp_id);
      auto q = s.q.find(series);
      if (q == s.q.end()) throw DataError("Q-hat for series '" + series + "' missing in mdp_id " + ep->mdp_id);
      t.rho.push_back(rho);
      t.r.push_back(v->second);
      t.q_logged.push_back(q->second.at(s.action));
      t.v_hat.push_back(dot(s.target_propensities, q->second));
      auto rh = s.reward_hat.find(series);
      t.v_reward.push_back(rh == s.reward_hat.end() ? t.v_hat.back() : dot(s.target_propensities, rh->second));
    }
    out.horizon = std::max(out.horizon, t.r.size());
    out.steps += t.r.size();
    out.episodes.push_back(std::move(t));
  }
  if (out.capped > 0) {
    log_warning("importance ratio capped at " + std::to_string(opt.rho_cap) + " on " + std::to_string(out.capped) +
                " steps of series '" + series + "'");
  }
  return out;
}

inline double mean_step(const Series& s, const std::function<double(const Track&, std::size_t)>& f) {
  std::vector<double> terms;
  terms.reserve(s.steps);
  for (const auto& t : s.episodes) {
    for (std::size_t i = 0; i < t.r.size(); ++i) terms.push_back(f(t, i));
  }
  return pairwise_sum(terms) / static_cast<double>(terms.size());
}

inline double logged_step_mean(const Series& s) {
  return mean_step(s, [](const Track& t, std::size_t i) { return t.r[i]; });
}

inline double logged_discounted(const Series& s, double gamma) {
  std::vector<double> ret(s.episodes.size());
  for (std::size_t e = 0; e < s.episodes.size(); ++e) {
    double g = 1.0;
    for (double r : s.episodes[e].r) {
      ret[e] += g * r;
      g *= gamma;
    }
  }
  return pairwise_sum(ret) / static_cast<double>(ret.size());
}

inline CpeEstimate make(const char* name, const std::string& series, double raw, double logged) {
  double norm = logged != 0.0 ? raw / logged : std::numeric_limits<double>::quiet_NaN();
  return {name, series, raw, norm, logged};
}

/// Per-step sums over episodes (weighted by `counts`) of the weighted-DR
/// terms. `a[t]` holds the step-t contribution and `c[j + 1]` the model
/// tail gamma^(j+1) * sum_i wn_j V(s_{j+1}); g(j) = sum_{t<=j} a[t] + c[j+1].
struct WeightedTerms {
  std::vector<double> a;
  std::vector<double> c;
};

inline WeightedTerms weighted_terms(const Series& s, double gamma, const std::vector<double>& counts) {
  const std::size_t n = s.episodes.size();
  const std::size_t horizon = s.horizon;
  std::vector<double> w(n, 1.0);       // cumulative weight, carried past the end
  std::vector<double> wn_prev(n, 0.0);  // normalized weight at t-1
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += counts[i];
  for (std::size_t i = 0; i < n; ++i) wn_prev[i] = 1.0 / total;
  WeightedTerms out;
  out.a.assign(horizon, 0.0);
  out.c.assign(horizon + 1, 0.0);
  double g = 1.0;
  std::vector<double> wn(n);
  {
    double c0 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (counts[i] != 0.0 && !s.episodes[i].v_hat.empty()) c0 += counts[i] * wn_prev[i] * s.episodes[i].v_hat[0];
    }
    out.c[0] = c0;
  }
  for (std::size_t t = 0; t < horizon; ++t) {
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Track& tr = s.episodes[i];
      if (t < tr.rho.size()) w[i] *= tr.rho[t];
      z += counts[i] * w[i];
    }
    if (!(z > 0.0)) throw DataError("no episode survives the importance weighting at step " + std::to_string(t));
    double a = 0.0;
    double tail = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      wn[i] = w[i] / z;
      if (counts[i] == 0.0) continue;
      const Track& tr = s.episodes[i];
      if (t < tr.r.size()) {
        a += counts[i] * (wn[i] * tr.r[t] - (wn[i] * tr.q_logged[t] - wn_prev[i] * tr.v_hat[t]));
      }
      if (t + 1 < tr.v_hat.size()) tail += counts[i] * wn[i] * tr.v_hat[t + 1];
    }
    out.a[t] = g * a;
    out.c[t + 1] = g * gamma * tail;
    g *= gamma;
    std::swap(wn_prev, wn);
  }
  return out;
}

inline std::vector<int> default_j(std::size_t horizon) {
  std::vector<int> j{-1};
  for (int k = 0; k < static_cast<int>(horizon) - 1; k = 2 * k + 1) j.push_back(k);
  j.push_back(static_cast<int>(horizon) - 1);
  std::sort(j.begin(), j.end());
  j.erase(std::unique(j.begin(), j.end()), j.end());
  return j;
}

inline std::vector<double> g_vector(const WeightedTerms& wt, const std::vector<int>& js) {
  std::vector<double> prefix(wt.a.size() + 1, 0.0);
  for (std::size_t t = 0; t < wt.a.size(); ++t) prefix[t + 1] = prefix[t] + wt.a[t];
  std::vector<double> g;
  for (int j : js) g.push_back(prefix[static_cast<std::size_t>(j + 1)] + wt.c[static_cast<std::size_t>(j + 1)]);
  return g;
}

}  // namespace cpe_detail

/// Minimizes x' M x over the probability simplex by projected gradient
/// descent with step 1 / (2 lambda_max(M)).
inline Eigen::VectorXd simplex_qp(const Eigen::MatrixXd& m, int iterations) {
  const auto k = m.rows();
  Eigen::VectorXd x = Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  double lmax = es.eigenvalues().maxCoeff();
  if (!(lmax > 0.0)) return x;
  double step = 1.0 / (2.0 * lmax);
  auto project = [](const Eigen::VectorXd& v) {
    std::vector<double> u(v.data(), v.data() + v.size());
    std::sort(u.begin(), u.end(), std::greater<>());
    double css = 0.0;
    double theta = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      css += u[i];
      double t = (css - 1.0) / static_cast<double>(i + 1);
      if (u[i] - t > 0.0) theta = t;
    }
    return Eigen::VectorXd((v.array() - theta).cwiseMax(0.0));
  };
  for (int it = 0; it < iterations; ++it) x = project(x - step * 2.0 * (m * x));
  return x;
}

inline CpeEstimate direct_method(const EvalDataset& ds, const std::string& series, const CpeOptions& opt = {}) {
  auto s = cpe_detail::prepare(ds, series, opt);
  double raw = cpe_detail::mean_step(s, [](const cpe_detail::Track& t, std::size_t i) { return t.v_reward[i]; });
  return cpe_detail::make("direct_method", series, raw, cpe_detail::logged_step_mean(s));
}

inline CpeEstimate stepwise_is(const EvalDataset& ds, const std::string& series, const CpeOptions& opt = {}) {
  auto s = cpe_detail::prepare(ds, series, opt);
  double raw = cpe_detail::mean_step(s, [](const cpe_detail::Track& t, std::size_t i) { return t.rho[i] * t.r[i]; });
  return cpe_detail::make("stepwise_is", series, raw, cpe_detail::logged_step_mean(s));
}

inline CpeEstimate stepwise_dr(const EvalDataset& ds, const std::string& series, const CpeOptions& opt = {}) {
  auto s = cpe_detail::prepare(ds, series, opt);
  double raw = cpe_detail::mean_step(
      s, [](const cpe_detail::Track& t, std::size_t i) { return t.v_hat[i] + t.rho[i] * (t.r[i] - t.q_logged[i]); });
  return cpe_detail::make("stepwise_dr", series, raw, cpe_detail::logged_step_mean(s));
}

namespace cpe_detail {

inline std::vector<double> ordinal_dr(const Series& s, double gamma) {
  std::vector<double> out(s.episodes.size());
  for (std::size_t e = 0; e < s.episodes.size(); ++e) {
    const auto& t = s.episodes[e];
    double v = 0.0;
    for (std::size_t i = t.r.size(); i-- > 0;) v = t.v_hat[i] + t.rho[i] * (t.r[i] + gamma * v - t.q_logged[i]);
    out[e] = v;
  }
  return out;
}

}  // namespace cpe_detail

/// Per-episode ordinal sequential-DR values (the recursion evaluated at t=0),
/// in mdp_id order.
inline std::vector<double> sequential_dr_episodes(const EvalDataset& ds, const std::string& series,
                                                  const CpeOptions& opt = {}) {
  return cpe_detail::ordinal_dr(cpe_detail::prepare(ds, series, opt), ds.gamma);
}

inline CpeEstimate sequential_dr(const EvalDataset& ds, const std::string& series, const CpeOptions& opt = {}) {
  auto s = cpe_detail::prepare(ds, series, opt);
  auto per = cpe_detail::ordinal_dr(s, ds.gamma);
  double raw = pairwise_sum(per) / static_cast<double>(per.size());
  return cpe_detail::make("sequential_dr", series, raw, cpe_detail::logged_discounted(s, ds.gamma));
}

inline CpeEstimate weighted_sequential_dr(const EvalDataset& ds, const std::string& series,
                                          const CpeOptions& opt = {}) {
  auto s = cpe_detail::prepare(ds, series, opt);
  std::vector<double> ones(s.episodes.size(), 1.0);
  auto wt = cpe_detail::weighted_terms(s, ds.gamma, ones);
  double raw = pairwise_sum(wt.a);
  return cpe_detail::make("weighted_sequential_dr", series, raw, cpe_detail::logged_discounted(s, ds.gamma));
}

/// Distance from v to [lo, hi]; 0 inside.
inline double interval_distance(double v, double lo, double hi) { return v < lo ? lo - v : v > hi ? v - hi : 0.0; }

struct MagicDetail {
  std::vector<int> j;
  std::vector<double> g;
  std::vector<double> bias;
  std::vector<double> weights;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

/// Blends the j-step weighted-DR returns with simplex weights minimizing
/// bootstrap covariance plus squared bias against the full-horizon CI.
inline CpeEstimate magic(const EvalDataset& ds, const std::string& series, const CpeOptions& opt = {},
                         MagicDetail* detail = nullptr) {
  auto s = cpe_detail::prepare(ds, series, opt);
  const std::size_t n = s.episodes.size();
  std::vector<int> js = opt.magic_j.empty() ? cpe_detail::default_j(s.horizon) : opt.magic_j;
  std::sort(js.begin(), js.end());
  js.erase(std::unique(js.begin(), js.end()), js.end());
  const int full = static_cast<int>(s.horizon) - 1;
  if (js.size() < 2) throw DataError("MAGIC needs at least two truncation indices");
  if (js.front() != -1 || js.back() != full) throw DataError("MAGIC J must contain -1 and the full horizon");
  for (int j : js) {
    if (j < -1 || j > full) throw DataError("MAGIC truncation index out of range");
  }
  const auto k = static_cast<Eigen::Index>(js.size());

  std::vector<double> ones(n, 1.0);
  auto g = cpe_detail::g_vector(cpe_detail::weighted_terms(s, ds.gamma, ones), js);

  const auto b_count = static_cast<std::size_t>(opt.bootstrap_samples);
  Eigen::MatrixXd boot(static_cast<Eigen::Index>(b_count), k);
  std::vector<std::string> errors(b_count);
  parallel_for(b_count, [&](std::size_t b) {
    std::mt19937_64 rng(derive_seed(opt.seed, b, 0x6d61676963ULL));
    std::vector<double> counts(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) counts[uniform_index(rng, n)] += 1.0;
    try {
      auto gb = cpe_detail::g_vector(cpe_detail::weighted_terms(s, ds.gamma, counts), js);
      for (Eigen::Index c = 0; c < k; ++c) boot(static_cast<Eigen::Index>(b), c) = gb[static_cast<std::size_t>(c)];
    } catch (const DataError& e) {
      errors[b] = e.what();
    }
  });
  std::vector<Eigen::Index> good;
  for (std::size_t b = 0; b < b_count; ++b) {
    if (errors[b].empty()) good.push_back(static_cast<Eigen::Index>(b));
  }
  if (good.size() < 2) throw DataError("MAGIC bootstrap failed: " + errors.front());
  Eigen::MatrixXd kept(static_cast<Eigen::Index>(good.size()), k);
  for (std::size_t i = 0; i < good.size(); ++i) kept.row(static_cast<Eigen::Index>(i)) = boot.row(good[i]);
  Eigen::RowVectorXd mean = kept.colwise().mean();
  Eigen::MatrixXd centered = kept.rowwise() - mean;
  Eigen::MatrixXd omega = centered.transpose() * centered / static_cast<double>(kept.rows() - 1);

  std::vector<double> fulls(static_cast<std::size_t>(kept.rows()));
  for (Eigen::Index i = 0; i < kept.rows(); ++i) fulls[static_cast<std::size_t>(i)] = kept(i, k - 1);
  std::sort(fulls.begin(), fulls.end());
  double lo = cpe_detail::sorted_percentile(fulls, opt.ci_low);
  double hi = cpe_detail::sorted_percentile(fulls, opt.ci_high);
  Eigen::VectorXd bias(k);
  for (Eigen::Index c = 0; c < k; ++c) bias[c] = interval_distance(g[static_cast<std::size_t>(c)], lo, hi);
  Eigen::MatrixXd m = omega + bias * bias.transpose() + opt.ridge * Eigen::MatrixXd::Identity(k, k);
  Eigen::VectorXd x = simplex_qp(m, opt.qp_iterations);
  double raw = 0.0;
  for (Eigen::Index c = 0; c < k; ++c) raw += x[c] * g[static_cast<std::size_t>(c)];
  if (detail != nullptr) {
    detail->j = js;
    detail->g = g;
    detail->bias.assign(bias.data(), bias.data() + k);
    detail->weights.assign(x.data(), x.data() + k);
    detail->ci_low = lo;
    detail->ci_high = hi;
  }
  return cpe_detail::make("magic", series, raw, cpe_detail::logged_discounted(s, ds.gamma));
}

inline const std::vector<std::string>& estimator_names() {
  static const std::vector<std::string> names{"direct_method", "stepwise_is",           "stepwise_dr",
                                              "sequential_dr", "weighted_sequential_dr", "magic"};
  return names;
}

/// All six estimators for every series in the dataset.
/// All estimators for every series. With `failures` set, an estimator that
/// cannot be computed yields NaN values and a message instead of throwing.
inline std::vector<CpeEstimate> cpe_report(const EvalDataset& ds, const CpeOptions& opt = {},
                                           std::vector<std::string>* failures = nullptr) {
  using Fn = std::function<CpeEstimate(const std::string&)>;
  const std::vector<std::pair<std::string, Fn>> estimators{
      {"direct_method", [&](const std::string& m) { return direct_method(ds, m, opt); }},
      {"stepwise_is", [&](const std::string& m) { return stepwise_is(ds, m, opt); }},
      {"stepwise_dr", [&](const std::string& m) { return stepwise_dr(ds, m, opt); }},
      {"sequential_dr", [&](const std::string& m) { return sequential_dr(ds, m, opt); }},
      {"weighted_sequential_dr", [&](const std::string& m) { return weighted_sequential_dr(ds, m, opt); }},
      {"magic", [&](const std::string& m) { return magic(ds, m, opt); }}};
  std::vector<CpeEstimate> out;
  for (const auto& series : ds.series()) {
    for (const auto& [name, fn] : estimators) {
      try {
        out.push_back(fn(series));
      } catch (const DataError& e) {
        if (!failures) throw;
        failures->push_back(name + " (" + series + "): " + e.what());
        out.push_back({name, series, std::nan(""), std::nan(""), std::nan("")});
      }
    }
  }
  return out;
}

}  // namespace batchrl
