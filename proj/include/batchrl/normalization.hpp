#pragma once

// Feature identification, offline fitting of per-feature transforms, and the
// lazy transform stage applied in the forward pass at training and serving
// time.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/tools/minima.hpp>

#include "batchrl/common.hpp"

namespace batchrl {

enum class FeatureKind { Binary, Probability, Continuous, Enum, Quantile, BoxCox };

inline const char* kind_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::Binary: return "BINARY";
    case FeatureKind::Probability: return "PROBABILITY";
    case FeatureKind::Continuous: return "CONTINUOUS";
    case FeatureKind::Enum: return "ENUM";
    case FeatureKind::Quantile: return "QUANTILE";
    case FeatureKind::BoxCox: return "BOXCOX";
  }
  return "?";
}

inline FeatureKind parse_kind(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
  if (s == "BINARY") return FeatureKind::Binary;
  if (s == "PROBABILITY") return FeatureKind::Probability;
  if (s == "CONTINUOUS") return FeatureKind::Continuous;
  if (s == "ENUM") return FeatureKind::Enum;
  if (s == "QUANTILE") return FeatureKind::Quantile;
  if (s == "BOXCOX") return FeatureKind::BoxCox;
  throw DataError("unknown feature kind '" + s + "'");
}

/// Thresholds of the identification cascade and fitting resolution.
struct NormalizationConfig {
  std::size_t min_samples = 100;
  std::size_t enum_threshold = 32;
  double skew_threshold = 2.0;
  double iqr_ratio_low = 0.5;
  double iqr_ratio_high = 2.5;
  std::size_t quantile_buckets = 1000;
  double clip_sigmas = 10.0;
};

struct NormalizationSpec {
  std::string feature_id;
  FeatureKind kind = FeatureKind::Continuous;
  // CONTINUOUS; BOXCOX reuses mean/stddev/clip for the post-transform standardization.
  double mean = 0.0;
  double stddev = 1.0;
  double clip_min = -std::numeric_limits<double>::infinity();
  double clip_max = std::numeric_limits<double>::infinity();
  double lambda = 1.0;
  std::vector<double> quantiles;
  std::vector<double> enum_values;

  std::size_t width() const { return kind == FeatureKind::Enum ? enum_values.size() : 1; }
};

namespace norm_detail {

constexpr double kProbabilityEps = 1e-6;
constexpr double kLogitClamp = 6.0;
constexpr double kQuantileClamp = 3.0;
constexpr double kBoxCoxMinInput = 1e-8;

inline double mean_of(const std::vector<double>& xs) {
  return pairwise_sum(xs) / static_cast<double>(xs.size());
}

inline double sample_stddev(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  std::vector<double> sq(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) sq[i] = (xs[i] - mean) * (xs[i] - mean);
  return std::sqrt(pairwise_sum(sq) / static_cast<double>(xs.size() - 1));
}

/// Type-7 (linear interpolation) quantile of sorted data.
inline double sorted_quantile(const std::vector<double>& sorted, double p) {
  double pos = p * static_cast<double>(sorted.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double skewness(const std::vector<double>& xs) {
  double m = mean_of(xs);
  std::vector<double> m2(xs.size()), m3(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double d = xs[i] - m;
    m2[i] = d * d;
    m3[i] = d * d * d;
  }
  double n = static_cast<double>(xs.size());
  double v = pairwise_sum(m2) / n;
  if (v <= 0.0) return 0.0;
  return (pairwise_sum(m3) / n) / std::pow(v, 1.5);
}

inline double boxcox(double x, double lambda) {
  double lx = std::log(std::max(x, kBoxCoxMinInput));
  if (std::abs(lambda) < 1e-12) return lx;
  return std::expm1(lambda * lx) / lambda;
}

/// Profile log-likelihood of the Box-Cox model (constants dropped).
inline double boxcox_loglik(const std::vector<double>& xs, double sum_log, double lambda) {
  std::vector<double> t(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) t[i] = boxcox(xs[i], lambda);
  double m = mean_of(t);
  for (double& v : t) v = (v - m) * (v - m);
  double var = pairwise_sum(t) / static_cast<double>(xs.size());
  if (!(var > 0.0)) return -std::numeric_limits<double>::infinity();
  return -0.5 * static_cast<double>(xs.size()) * std::log(var) + (lambda - 1.0) * sum_log;
}

/// Coarse grid over [-2, 2] then Brent refinement around the best point.
inline double fit_boxcox_lambda(const std::vector<double>& xs) {
  double sum_log = 0.0;
  for (double x : xs) sum_log += std::log(x);
  double best = 1.0;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (int i = -20; i <= 20; ++i) {
    double lam = 0.1 * i;
    double ll = boxcox_loglik(xs, sum_log, lam);
    if (ll > best_ll) {
      best_ll = ll;
      best = lam;
    }
  }
  double lo = std::max(-2.0, best - 0.1);
  double hi = std::min(2.0, best + 0.1);
  auto neg = [&](double lam) { return -boxcox_loglik(xs, sum_log, lam); };
  auto [lam, val] = boost::math::tools::brent_find_minima(neg, lo, hi, 40);
  return -val >= best_ll ? lam : best;
}

inline double normal_quantile(double p) {
  static const boost::math::normal_distribution<double> unit{};
  return boost::math::quantile(unit, p);
}

inline double quantile_position(const std::vector<double>& q, double x) {
  const double buckets = static_cast<double>(q.size() - 1);
  auto lo = static_cast<std::size_t>(std::lower_bound(q.begin(), q.end(), x) - q.begin());
  auto hi = static_cast<std::size_t>(std::upper_bound(q.begin(), q.end(), x) - q.begin());
  if (lo < hi) return (static_cast<double>(lo + hi - 1) * 0.5) / buckets;
  if (lo == 0) return 0.0;
  if (lo == q.size()) return 1.0;
  double frac = (x - q[lo - 1]) / (q[lo] - q[lo - 1]);
  return (static_cast<double>(lo - 1) + frac) / buckets;
}

}  // namespace norm_detail

/// Chooses a transform for one feature from its sample values.
inline FeatureKind identify_feature(const std::vector<double>& samples,
                                    const NormalizationConfig& cfg = {}) {
  if (samples.size() < cfg.min_samples) {
    throw DataError("only " + std::to_string(samples.size()) +
                    " samples available (need " + std::to_string(cfg.min_samples) +
                    "); specify the feature kind manually with an override");
  }
  std::set<double> distinct(samples.begin(), samples.end());
  bool all_binary = std::all_of(distinct.begin(), distinct.end(),
                                [](double v) { return v == 0.0 || v == 1.0; });
  if (all_binary) return FeatureKind::Binary;
  bool unit_interval = *distinct.begin() >= 0.0 && *distinct.rbegin() <= 1.0;
  if (unit_interval && distinct.size() > cfg.enum_threshold) return FeatureKind::Probability;
  bool integral = std::all_of(distinct.begin(), distinct.end(),
                              [](double v) { return v == std::floor(v); });
  if (distinct.size() <= cfg.enum_threshold && integral) return FeatureKind::Enum;

  double mean = norm_detail::mean_of(samples);
  double sd = norm_detail::sample_stddev(samples, mean);
  if (!(sd > 0.0)) return FeatureKind::Continuous;
  if (*distinct.begin() > 0.0 && std::abs(norm_detail::skewness(samples)) > cfg.skew_threshold) {
    return FeatureKind::BoxCox;
  }
  std::vector<double> sorted(samples);
  std::sort(sorted.begin(), sorted.end());
  double iqr = norm_detail::sorted_quantile(sorted, 0.75) - norm_detail::sorted_quantile(sorted, 0.25);
  double ratio = iqr / sd;
  if (ratio < cfg.iqr_ratio_low || ratio > cfg.iqr_ratio_high) return FeatureKind::Quantile;
  return FeatureKind::Continuous;
}

/// Fits transform parameters for `kind`. BOXCOX over non-positive data falls
/// back to CONTINUOUS with a warning.
inline NormalizationSpec fit_spec(const std::vector<double>& samples, FeatureKind kind,
                                  const std::string& feature_id = "",
                                  const NormalizationConfig& cfg = {}) {
  if (samples.empty()) throw DataError("cannot fit feature '" + feature_id + "' without samples");
  NormalizationSpec spec;
  spec.feature_id = feature_id;
  spec.kind = kind;

  auto fit_standardization = [&](const std::vector<double>& xs) {
    spec.mean = norm_detail::mean_of(xs);
    double sd = norm_detail::sample_stddev(xs, spec.mean);
    spec.stddev = (sd > 1e-8 && std::isfinite(sd)) ? sd : 1.0;
    spec.clip_min = spec.mean - cfg.clip_sigmas * spec.stddev;
    spec.clip_max = spec.mean + cfg.clip_sigmas * spec.stddev;
  };

  switch (kind) {
    case FeatureKind::Binary:
    case FeatureKind::Probability:
      break;
    case FeatureKind::Continuous:
      fit_standardization(samples);
      break;
    case FeatureKind::BoxCox: {
      bool positive = std::all_of(samples.begin(), samples.end(), [](double v) { return v > 0.0; });
      if (!positive) {
        log_warning("feature '" + feature_id +
                    "' has non-positive values; BOXCOX falls back to CONTINUOUS");
        spec.kind = FeatureKind::Continuous;
        fit_standardization(samples);
        break;
      }
      spec.lambda = norm_detail::fit_boxcox_lambda(samples);
      std::vector<double> t(samples.size());
      for (std::size_t i = 0; i < samples.size(); ++i) t[i] = norm_detail::boxcox(samples[i], spec.lambda);
      fit_standardization(t);
      break;
    }
    case FeatureKind::Quantile: {
      std::vector<double> sorted(samples);
      std::sort(sorted.begin(), sorted.end());
      spec.quantiles.resize(cfg.quantile_buckets + 1);
      for (std::size_t i = 0; i <= cfg.quantile_buckets; ++i) {
        spec.quantiles[i] = norm_detail::sorted_quantile(
            sorted, static_cast<double>(i) / static_cast<double>(cfg.quantile_buckets));
      }
      break;
    }
    case FeatureKind::Enum: {
      std::set<double> distinct(samples.begin(), samples.end());
      spec.enum_values.assign(distinct.begin(), distinct.end());
      break;
    }
  }
  return spec;
}

/// Writes spec.width() transformed values for `value` into `out`.
inline void apply_spec_into(double value, const NormalizationSpec& spec, double* out) {
  if (!std::isfinite(value)) value = 0.0;
  switch (spec.kind) {
    case FeatureKind::Binary:
      out[0] = value != 0.0 ? 1.0 : 0.0;
      return;
    case FeatureKind::Probability: {
      double p = std::clamp(value, norm_detail::kProbabilityEps, 1.0 - norm_detail::kProbabilityEps);
      out[0] = std::clamp(std::log(p / (1.0 - p)), -norm_detail::kLogitClamp, norm_detail::kLogitClamp);
      return;
    }
    case FeatureKind::Continuous:
      out[0] = (std::clamp(value, spec.clip_min, spec.clip_max) - spec.mean) / spec.stddev;
      return;
    case FeatureKind::BoxCox: {
      double t = norm_detail::boxcox(value, spec.lambda);
      if (std::isnan(t)) t = spec.mean;
      out[0] = (std::clamp(t, spec.clip_min, spec.clip_max) - spec.mean) / spec.stddev;
      return;
    }
    case FeatureKind::Quantile: {
      double p = norm_detail::quantile_position(spec.quantiles, value);
      p = std::clamp(p, 1e-12, 1.0 - 1e-12);
      out[0] = std::clamp(norm_detail::normal_quantile(p), -norm_detail::kQuantileClamp,
                          norm_detail::kQuantileClamp);
      return;
    }
    case FeatureKind::Enum: {
      for (std::size_t i = 0; i < spec.enum_values.size(); ++i) out[i] = 0.0;
      auto it = std::lower_bound(spec.enum_values.begin(), spec.enum_values.end(), value);
      if (it != spec.enum_values.end() && *it == value) {
        out[it - spec.enum_values.begin()] = 1.0;
      }
      return;
    }
  }
}

inline std::vector<double> apply_spec(double value, const NormalizationSpec& spec) {
  std::vector<double> out(spec.width());
  apply_spec_into(value, spec, out.data());
  return out;
}

inline Json spec_to_json(const NormalizationSpec& s) {
  Json params = Json::object();
  switch (s.kind) {
    case FeatureKind::Binary:
    case FeatureKind::Probability:
      break;
    case FeatureKind::Continuous:
      params = {{"mean", s.mean}, {"stddev", s.stddev}, {"clip_min", s.clip_min}, {"clip_max", s.clip_max}};
      break;
    case FeatureKind::BoxCox:
      params = {{"lambda", s.lambda},     {"post_mean", s.mean},     {"post_stddev", s.stddev},
                {"clip_min", s.clip_min}, {"clip_max", s.clip_max}};
      break;
    case FeatureKind::Quantile:
      params = {{"quantiles", s.quantiles}};
      break;
    case FeatureKind::Enum:
      params = {{"values", s.enum_values}};
      break;
  }
  return {{"kind", kind_name(s.kind)}, {"params", params}};
}

inline NormalizationSpec spec_from_json(const std::string& feature_id, const Json& j) {
  NormalizationSpec s;
  s.feature_id = feature_id;
  try {
    s.kind = parse_kind(j.at("kind").get<std::string>());
    const Json& p = j.contains("params") ? j.at("params") : Json::object();
    switch (s.kind) {
      case FeatureKind::Binary:
      case FeatureKind::Probability:
        break;
      case FeatureKind::Continuous:
        s.mean = p.at("mean").get<double>();
        s.stddev = p.at("stddev").get<double>();
        s.clip_min = p.value("clip_min", -std::numeric_limits<double>::infinity());
        s.clip_max = p.value("clip_max", std::numeric_limits<double>::infinity());
        break;
      case FeatureKind::BoxCox:
        s.lambda = p.at("lambda").get<double>();
        s.mean = p.at("post_mean").get<double>();
        s.stddev = p.at("post_stddev").get<double>();
        s.clip_min = p.value("clip_min", -std::numeric_limits<double>::infinity());
        s.clip_max = p.value("clip_max", std::numeric_limits<double>::infinity());
        break;
      case FeatureKind::Quantile:
        s.quantiles = p.at("quantiles").get<std::vector<double>>();
        break;
      case FeatureKind::Enum:
        s.enum_values = p.at("values").get<std::vector<double>>();
        break;
    }
  } catch (const Json::exception& e) {
    throw DataError("normalization spec for '" + feature_id + "': " + e.what());
  }
  if ((s.kind == FeatureKind::Continuous || s.kind == FeatureKind::BoxCox) && !(s.stddev > 0.0)) {
    throw DataError("normalization spec for '" + feature_id + "': stddev must be > 0");
  }
  if (s.kind == FeatureKind::Quantile &&
      (s.quantiles.size() < 2 || !std::is_sorted(s.quantiles.begin(), s.quantiles.end()))) {
    throw DataError("normalization spec for '" + feature_id + "': quantiles must be non-decreasing");
  }
  if (s.kind == FeatureKind::Enum) {
    if (s.enum_values.empty()) {
      throw DataError("normalization spec for '" + feature_id + "': enum values must be non-empty");
    }
    std::sort(s.enum_values.begin(), s.enum_values.end());
    if (std::adjacent_find(s.enum_values.begin(), s.enum_values.end()) != s.enum_values.end()) {
      throw DataError("normalization spec for '" + feature_id + "': duplicate enum values");
    }
  }
  return s;
}

inline Json specs_to_json(const std::vector<NormalizationSpec>& specs) {
  Json j = Json::object();
  for (const auto& s : specs) j[s.feature_id] = spec_to_json(s);
  return j;
}

inline std::vector<NormalizationSpec> specs_from_json(const Json& j) {
  if (!j.is_object()) throw DataError("normalization file must be a JSON object");
  std::vector<NormalizationSpec> specs;
  for (const auto& [id, v] : j.items()) specs.push_back(spec_from_json(id, v));
  return specs;
}

inline std::string specs_digest(const std::vector<NormalizationSpec>& specs) {
  return hex64(fnv1a64(specs_to_json(specs).dump()));
}

/// Column slice of one feature in the dense output.
struct FeatureSlot {
  std::size_t offset = 0;
  std::size_t width = 1;
};

/// Immutable transform stage: raw feature maps in, dense normalized matrix out.
class Preprocessor {
 public:
  Preprocessor() = default;

  explicit Preprocessor(std::vector<NormalizationSpec> specs) : specs_(std::move(specs)) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const auto& s = specs_[i];
      if (layout_.contains(s.feature_id)) throw DataError("duplicate feature_id '" + s.feature_id + "'");
      layout_[s.feature_id] = FeatureSlot{offset, s.width()};
      offset += s.width();
      groups_[s.kind].push_back(i);
    }
    width_ = offset;
  }

  std::size_t width() const { return width_; }
  const std::vector<NormalizationSpec>& specs() const { return specs_; }
  const std::map<std::string, FeatureSlot>& layout() const { return layout_; }
  std::string digest() const { return specs_digest(specs_); }

  /// Name of the feature owning output column `col`.
  const std::string& feature_of_column(std::size_t col) const {
    for (const auto& s : specs_) {
      const auto& slot = layout_.at(s.feature_id);
      if (col >= slot.offset && col < slot.offset + slot.width) return s.feature_id;
    }
    throw DataError("column out of range");
  }

  void transform_into(const FeatureMap& row, double* out) const {
    for (const auto& s : specs_) {
      const FeatureSlot& slot = layout_.at(s.feature_id);
      auto it = row.find(s.feature_id);
      if (it == row.end()) {
        std::fill(out + slot.offset, out + slot.offset + slot.width, 0.0);
      } else {
        apply_spec_into(it->second, s, out + slot.offset);
      }
    }
  }

  Eigen::RowVectorXd transform(const FeatureMap& row) const {
    Eigen::RowVectorXd out(static_cast<Eigen::Index>(width_));
    transform_into(row, out.data());
    return out;
  }

  /// Batched transform: features are processed kind by kind over all rows.
  Eigen::MatrixXd transform_batch(const std::vector<const FeatureMap*>& rows) const {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out(
        static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width_));
    std::vector<double> column(rows.size());
    for (const auto& [kind, members] : groups_) {
      for (std::size_t si : members) {
        const auto& s = specs_[si];
        const FeatureSlot& slot = layout_.at(s.feature_id);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          double* dst = out.row(static_cast<Eigen::Index>(r)).data() + slot.offset;
          auto it = rows[r]->find(s.feature_id);
          if (it == rows[r]->end()) {
            std::fill(dst, dst + slot.width, 0.0);
          } else {
            apply_spec_into(it->second, s, dst);
          }
        }
      }
    }
    return out;
  }

  Eigen::MatrixXd transform_batch(const std::vector<FeatureMap>& rows) const {
    std::vector<const FeatureMap*> ptrs;
    ptrs.reserve(rows.size());
    for (const auto& r : rows) ptrs.push_back(&r);
    return transform_batch(ptrs);
  }

 private:
  std::vector<NormalizationSpec> specs_;
  std::map<std::string, FeatureSlot> layout_;
  std::map<FeatureKind, std::vector<std::size_t>> groups_;
  std::size_t width_ = 0;
};

/// Identifies and fits every feature seen in `rows`. `overrides` pins a kind.
inline std::vector<NormalizationSpec> fit_normalization(
    const std::vector<const FeatureMap*>& rows, const NormalizationConfig& cfg = {},
    const std::map<std::string, FeatureKind>& overrides = {}) {
  std::map<std::string, std::vector<double>> values;
  for (const FeatureMap* row : rows) {
    for (const auto& [k, v] : *row) {
      if (std::isfinite(v)) values[k].push_back(v);
    }
  }
  for (const auto& [k, kind] : overrides) {
    if (!values.contains(k)) throw DataError("override names unknown feature '" + k + "'");
  }
  std::vector<std::pair<std::string, std::vector<double>>> items(values.begin(), values.end());
  std::vector<std::optional<NormalizationSpec>> fitted(items.size());
  std::vector<std::string> errors(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const auto& [id, xs] = items[i];
    try {
      auto ov = overrides.find(id);
      FeatureKind kind = ov != overrides.end() ? ov->second : identify_feature(xs, cfg);
      fitted[i] = fit_spec(xs, kind, id, cfg);
    } catch (const DataError& e) {
      errors[i] = "feature '" + id + "': " + e.what();
    }
  });
  std::vector<NormalizationSpec> specs;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!errors[i].empty()) throw DataError(errors[i]);
    specs.push_back(std::move(*fitted[i]));
  }
  return specs;
}

}  // namespace batchrl
