#pragma once

// Serving-time policies: propensity-logging action selection, the sigmoid
// send/drop threshold rule, and the PID controller that tunes its threshold.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "batchrl/common.hpp"

namespace batchrl {

struct PolicyMode {
  enum class Kind { Greedy, Epsilon, Softmax };
  Kind kind = Kind::Greedy;
  double param = 0.0;

  /// Parses "greedy", "epsilon:<e>" (or "eps:<e>") and "softmax:<t>".
  static PolicyMode parse(const std::string& s) {
    PolicyMode m;
    if (s == "greedy") return m;
    auto colon = s.find(':');
    if (colon == std::string::npos) throw UsageError("invalid target policy '" + s + "'");
    std::string head = s.substr(0, colon);
    try {
      m.param = std::stod(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw UsageError("invalid policy parameter in '" + s + "'");
    }
    if (head == "epsilon" || head == "eps") {
      if (!(m.param >= 0.0 && m.param <= 1.0)) throw UsageError("epsilon must be in [0, 1]");
      m.kind = Kind::Epsilon;
    } else if (head == "softmax") {
      if (!(m.param > 0.0)) throw UsageError("softmax temperature must be > 0");
      m.kind = Kind::Softmax;
    } else {
      throw UsageError("invalid target policy '" + s + "'");
    }
    return m;
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::Greedy: return "greedy";
      case Kind::Epsilon: return "epsilon:" + std::to_string(param);
      case Kind::Softmax: return "softmax:" + std::to_string(param);
    }
    return "greedy";
  }
};

struct PolicyDecision {
  std::size_t chosen = 0;
  double propensity = 1.0;
  std::vector<double> propensities;
};

/// Action distribution for `q` under `mode`. Greedy splits ties uniformly;
/// epsilon puts its 1-eps mass on the first maximizer.
inline std::vector<double> policy_propensities(const std::vector<double>& q, const PolicyMode& mode) {
  const std::size_t n = q.size();
  if (n == 0) throw DataError("no possible actions to choose from");
  std::vector<double> p(n, 0.0);
  double best = *std::max_element(q.begin(), q.end());
  switch (mode.kind) {
    case PolicyMode::Kind::Greedy: {
      std::size_t ties = static_cast<std::size_t>(std::count(q.begin(), q.end(), best));
      for (std::size_t i = 0; i < n; ++i) p[i] = q[i] == best ? 1.0 / static_cast<double>(ties) : 0.0;
      break;
    }
    case PolicyMode::Kind::Epsilon: {
      std::size_t first = static_cast<std::size_t>(std::find(q.begin(), q.end(), best) - q.begin());
      for (auto& v : p) v = mode.param / static_cast<double>(n);
      p[first] += 1.0 - mode.param;
      break;
    }
    case PolicyMode::Kind::Softmax: {
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) z += p[i] = std::exp((q[i] - best) / mode.param);
      for (auto& v : p) v /= z;
      break;
    }
  }
  return p;
}

/// Samples an action from the policy distribution and reports the full map.
inline PolicyDecision select_action(const std::vector<double>& q, const PolicyMode& mode, std::mt19937_64& rng) {
  PolicyDecision d;
  d.propensities = policy_propensities(q, mode);
  double u = uniform01(rng);
  double c = 0.0;
  d.chosen = d.propensities.size() - 1;
  for (std::size_t i = 0; i < d.propensities.size(); ++i) {
    c += d.propensities[i];
    if (u < c) {
      d.chosen = i;
      break;
    }
  }
  while (d.propensities[d.chosen] == 0.0 && d.chosen > 0) --d.chosen;
  d.propensity = d.propensities[d.chosen];
  return d;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

/// Send iff sigmoid(q_send - q_drop) >= threshold.
inline bool threshold_policy(double q_send, double q_drop, double threshold) {
  return sigmoid(q_send - q_drop) >= threshold;
}

/// Keeps the send rate of a threshold policy at `target_rate`. Sending too
/// much (positive error) raises the threshold.
struct PidController {
  double kp = 0.5;
  double ki = 0.05;
  double kd = 0.0;
  double target_rate = 0.5;
  double threshold = 0.5;
  double integral = 0.0;
  double prev_error = 0.0;

  static constexpr double kMin = 0.001;
  static constexpr double kMax = 0.999;

  void update(double observed_send_rate) {
    double e = observed_send_rate - target_rate;
    integral += e;
    double delta = kp * e + ki * integral + kd * (e - prev_error);
    threshold = std::clamp(threshold + delta, kMin, kMax);
    prev_error = e;
  }

  Json to_json() const {
    return {{"kp", kp},         {"ki", ki},           {"kd", kd},          {"target_rate", target_rate},
            {"threshold", threshold}, {"integral", integral}, {"prev_error", prev_error}};
  }
};

inline PidController pid_update(PidController ctrl, double observed_send_rate) {
  ctrl.update(observed_send_rate);
  return ctrl;
}

}  // namespace batchrl
