#pragma once

// Bundled environments with exact oracles: Gridworld (tabular), CartPole,
// a continuous point mass, and a small chain MDP used as a CPE fixture.
// Also generates logged rows with exact behavior propensities.

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "batchrl/common.hpp"
#include "batchrl/timeline.hpp"

namespace batchrl {

// ---------------------------------------------------------------------------
// Tabular MDPs

struct Outcome {
  int next = 0;
  double prob = 1.0;
  double reward = 0.0;
  bool terminal = false;
};

/// Finite MDP with explicit outcome lists per (state, action). Terminal
/// outcomes end the episode; states flagged absorbing have value 0.
struct TabularMdp {
  int num_states = 0;
  int num_actions = 0;
  std::vector<std::vector<std::vector<Outcome>>> outcomes;
  std::vector<bool> absorbing;

  const std::vector<Outcome>& at(int s, int a) const {
    return outcomes[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
  }
};

/// Q(s, a) = E[r + gamma * V(s')] with V = 0 past terminal outcomes.
inline Eigen::MatrixXd q_from_values(const TabularMdp& mdp, const Eigen::VectorXd& v, double gamma) {
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(mdp.num_states, mdp.num_actions);
  for (int s = 0; s < mdp.num_states; ++s) {
    if (mdp.absorbing[static_cast<std::size_t>(s)]) continue;
    for (int a = 0; a < mdp.num_actions; ++a) {
      double total = 0.0;
      for (const auto& o : mdp.at(s, a)) total += o.prob * (o.reward + (o.terminal ? 0.0 : gamma * v[o.next]));
      q(s, a) = total;
    }
  }
  return q;
}

struct ValueIterationResult {
  Eigen::VectorXd values;
  std::vector<int> policy;
  double residual = 0.0;
  int iterations = 0;
};

/// Bellman-optimal values to `tol`; greedy policy takes the lowest index on ties.
inline ValueIterationResult value_iteration(const TabularMdp& mdp, double gamma, double tol = 1e-10,
                                            int max_iterations = 1000000) {
  ValueIterationResult out;
  out.values = Eigen::VectorXd::Zero(mdp.num_states);
  for (out.iterations = 0; out.iterations < max_iterations; ++out.iterations) {
    Eigen::MatrixXd q = q_from_values(mdp, out.values, gamma);
    Eigen::VectorXd next = q.rowwise().maxCoeff();
    for (int s = 0; s < mdp.num_states; ++s) {
      if (mdp.absorbing[static_cast<std::size_t>(s)]) next[s] = 0.0;
    }
    out.residual = (next - out.values).cwiseAbs().maxCoeff();
    out.values = next;
    if (out.residual <= tol * (1.0 - gamma) || out.residual == 0.0) break;
  }
  Eigen::MatrixXd q = q_from_values(mdp, out.values, gamma);
  out.residual = 0.0;
  out.policy.assign(static_cast<std::size_t>(mdp.num_states), 0);
  for (int s = 0; s < mdp.num_states; ++s) {
    Eigen::Index best = 0;
    for (Eigen::Index a = 1; a < q.cols(); ++a) {
      if (q(s, a) > q(s, best)) best = a;
    }
    out.policy[static_cast<std::size_t>(s)] = static_cast<int>(best);
    if (!mdp.absorbing[static_cast<std::size_t>(s)]) {
      out.residual = std::max(out.residual, std::abs(q(s, best) - out.values[s]));
    }
  }
  return out;
}

/// Exact V^pi by solving (I - gamma P_pi) V = r_pi; pi is states x actions.
inline Eigen::VectorXd policy_evaluation(const TabularMdp& mdp, const Eigen::MatrixXd& pi, double gamma) {
  const int n = mdp.num_states;
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  for (int s = 0; s < n; ++s) {
    if (mdp.absorbing[static_cast<std::size_t>(s)]) continue;
    for (int act = 0; act < mdp.num_actions; ++act) {
      double p = pi(s, act);
      if (p == 0.0) continue;
      for (const auto& o : mdp.at(s, act)) {
        b[s] += p * o.prob * o.reward;
        if (!o.terminal) a(s, o.next) -= gamma * p * o.prob;
      }
    }
  }
  return a.partialPivLu().solve(b);
}

inline Eigen::MatrixXd deterministic_policy_table(const std::vector<int>& policy, int num_actions) {
  Eigen::MatrixXd pi = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(policy.size()), num_actions);
  for (std::size_t s = 0; s < policy.size(); ++s) pi(static_cast<Eigen::Index>(s), policy[s]) = 1.0;
  return pi;
}

// ---------------------------------------------------------------------------
// Environment interface

using State = std::vector<double>;

struct StepResult {
  State next_state;
  double reward = 0.0;
  bool terminal = false;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::string name() const = 0;
  virtual bool continuous_actions() const { return false; }
  /// Discrete action names, in index order.
  virtual std::vector<std::string> actions() const { return {}; }
  /// Feature names of a continuous action.
  virtual std::vector<std::string> action_feature_names() const { return {}; }
  virtual State reset(std::mt19937_64& rng) const = 0;
  virtual StepResult step(const State& s, int action, std::mt19937_64& rng) const {
    (void)s, (void)action, (void)rng;
    throw DataError(name() + " has continuous actions");
  }
  virtual StepResult step_continuous(const State& s, const std::vector<double>& action,
                                     std::mt19937_64& rng) const {
    (void)s, (void)action, (void)rng;
    throw DataError(name() + " has discrete actions");
  }
  virtual FeatureMap features(const State& s) const = 0;
  virtual int max_steps() const = 0;
  virtual double gamma() const = 0;
  /// Preference scores per discrete action used by the epsilon-greedy and
  /// softmax behavior policies (higher is better).
  virtual std::vector<double> action_scores(const State& s) const {
    return std::vector<double>(actions().size(), 0.0);
  }

  int action_index(const std::string& a) const {
    auto names = actions();
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == a) return static_cast<int>(i);
    }
    throw DataError("invalid action '" + a + "' for " + name());
  }
};

// ---------------------------------------------------------------------------
// Gridworld

struct GridworldConfig {
  int width = 5;
  int height = 5;
  std::vector<int> walls;
  int start = 0;
  int goal = -1;  // -1: bottom-right cell
  double step_reward = 0.0;
  double goal_reward = 1.0;
  double gamma = 0.9;
  double slip = 0.0;
  int max_steps = 100;
  bool random_start = false;  // episodes start in a uniformly random open cell

  static GridworldConfig from_json(const Json& j) {
    GridworldConfig c;
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    c.walls = j.value("walls", c.walls);
    c.start = j.value("start", c.start);
    c.goal = j.value("goal", c.goal);
    c.step_reward = j.value("step_reward", c.step_reward);
    c.goal_reward = j.value("goal_reward", c.goal_reward);
    c.gamma = j.value("gamma", c.gamma);
    c.slip = j.value("slip", c.slip);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.random_start = j.value("random_start", c.random_start);
    return c;
  }
};

/// Grid of cells indexed y*width + x. Actions up/down/left/right; bumping a
/// wall or the border leaves the agent in place. With probability `slip` the
/// move goes in a uniformly random direction instead.
class Gridworld : public Environment {
 public:
  explicit Gridworld(GridworldConfig cfg = {}) : cfg_(std::move(cfg)) {
    if (cfg_.width < 1 || cfg_.height < 1) throw DataError("gridworld dimensions must be positive");
    if (cfg_.goal < 0) cfg_.goal = cells() - 1;
    if (!(cfg_.slip >= 0.0 && cfg_.slip < 1.0)) throw DataError("slip must be in [0, 1)");
    wall_.assign(static_cast<std::size_t>(cells()), false);
    for (int w : cfg_.walls) {
      if (w < 0 || w >= cells()) throw DataError("wall cell out of range");
      wall_[static_cast<std::size_t>(w)] = true;
    }
    if (is_wall(cfg_.start) || is_wall(cfg_.goal) || cfg_.start == cfg_.goal) {
      throw DataError("start and goal must be distinct open cells");
    }
    if (!goal_reachable()) throw DataError("goal is not reachable from start");
    auto vi = value_iteration(tabular(), cfg_.gamma);
    q_star_ = q_from_values(tabular(), vi.values, cfg_.gamma);
  }

  const GridworldConfig& config() const { return cfg_; }
  int cells() const { return cfg_.width * cfg_.height; }
  bool is_wall(int c) const { return wall_[static_cast<std::size_t>(c)]; }

  std::string name() const override { return "gridworld"; }
  std::vector<std::string> actions() const override { return {"up", "down", "left", "right"}; }
  int max_steps() const override { return cfg_.max_steps; }
  double gamma() const override { return cfg_.gamma; }

  int move(int cell, int action) const {
    int x = cell % cfg_.width;
    int y = cell / cfg_.width;
    switch (action) {
      case 0: --y; break;
      case 1: ++y; break;
      case 2: --x; break;
      case 3: ++x; break;
      default: throw DataError("invalid gridworld action index " + std::to_string(action));
    }
    if (x < 0 || y < 0 || x >= cfg_.width || y >= cfg_.height) return cell;
    int next = y * cfg_.width + x;
    return is_wall(next) ? cell : next;
  }

  TabularMdp tabular() const {
    TabularMdp m;
    m.num_states = cells();
    m.num_actions = 4;
    m.outcomes.assign(static_cast<std::size_t>(cells()), std::vector<std::vector<Outcome>>(4));
    m.absorbing.assign(static_cast<std::size_t>(cells()), false);
    for (int c = 0; c < cells(); ++c) {
      if (c == cfg_.goal || is_wall(c)) {
        m.absorbing[static_cast<std::size_t>(c)] = true;
        continue;
      }
      for (int a = 0; a < 4; ++a) {
        std::map<int, double> dist;
        dist[move(c, a)] += 1.0 - cfg_.slip;
        for (int d = 0; d < 4; ++d) dist[move(c, d)] += cfg_.slip / 4.0;
        for (const auto& [next, p] : dist) {
          if (p == 0.0) continue;
          bool goal = next == cfg_.goal;
          m.outcomes[static_cast<std::size_t>(c)][static_cast<std::size_t>(a)].push_back(
              Outcome{next, p, cfg_.step_reward + (goal ? cfg_.goal_reward : 0.0), goal});
        }
      }
    }
    return m;
  }

  State reset(std::mt19937_64& rng) const override {
    if (!cfg_.random_start) return {static_cast<double>(cfg_.start)};
    std::vector<int> open;
    for (int c = 0; c < cells(); ++c) {
      if (!is_wall(c) && c != cfg_.goal) open.push_back(c);
    }
    return {static_cast<double>(open[uniform_index(rng, open.size())])};
  }

  StepResult step(const State& s, int action, std::mt19937_64& rng) const override {
    int cell = static_cast<int>(s.at(0));
    if (action < 0 || action > 3) throw DataError("invalid gridworld action index " + std::to_string(action));
    int dir = action;
    if (cfg_.slip > 0.0 && uniform01(rng) < cfg_.slip) dir = static_cast<int>(uniform_index(rng, 4));
    int next = move(cell, dir);
    bool goal = next == cfg_.goal;
    return {{static_cast<double>(next)}, cfg_.step_reward + (goal ? cfg_.goal_reward : 0.0), goal};
  }

  FeatureMap features(const State& s) const override {
    FeatureMap f;
    int cell = static_cast<int>(s.at(0));
    for (int c = 0; c < cells(); ++c) f["cell_" + std::to_string(c)] = c == cell ? 1.0 : 0.0;
    return f;
  }

  /// Inverse of features(): the hot cell, or -1 if none.
  int cell_of(const FeatureMap& f) const {
    for (int c = 0; c < cells(); ++c) {
      auto it = f.find("cell_" + std::to_string(c));
      if (it != f.end() && it->second > 0.5) return c;
    }
    return -1;
  }

  std::vector<double> action_scores(const State& s) const override {
    int cell = static_cast<int>(s.at(0));
    std::vector<double> out(4);
    for (int a = 0; a < 4; ++a) out[static_cast<std::size_t>(a)] = q_star_(cell, a);
    return out;
  }

  const Eigen::MatrixXd& q_star() const { return q_star_; }

 private:
  bool goal_reachable() const {
    std::vector<bool> seen(static_cast<std::size_t>(cells()), false);
    std::deque<int> frontier{cfg_.start};
    seen[static_cast<std::size_t>(cfg_.start)] = true;
    while (!frontier.empty()) {
      int c = frontier.front();
      frontier.pop_front();
      if (c == cfg_.goal) return true;
      for (int a = 0; a < 4; ++a) {
        int n = move(c, a);
        if (!seen[static_cast<std::size_t>(n)]) {
          seen[static_cast<std::size_t>(n)] = true;
          frontier.push_back(n);
        }
      }
    }
    return false;
  }

  GridworldConfig cfg_;
  std::vector<bool> wall_;
  Eigen::MatrixXd q_star_;
};

// ---------------------------------------------------------------------------
// CartPole

struct CartPoleConfig {
  double gravity = 9.8;
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double half_length = 0.5;
  double force = 10.0;
  double dt = 0.02;
  double x_threshold = 2.4;
  double theta_threshold = 12.0 * 2.0 * 3.14159265358979323846 / 360.0;
  int max_steps = 200;
  double gamma = 0.99;

  static CartPoleConfig from_json(const Json& j) {
    CartPoleConfig c;
    c.max_steps = j.value("max_steps", c.max_steps);
    c.gamma = j.value("gamma", c.gamma);
    return c;
  }
};

/// Classic cart-pole with Euler integration; state (x, x_dot, theta, theta_dot).
class CartPole : public Environment {
 public:
  explicit CartPole(CartPoleConfig cfg = {}) : cfg_(cfg) {}

  std::string name() const override { return "cartpole"; }
  std::vector<std::string> actions() const override { return {"left", "right"}; }
  int max_steps() const override { return cfg_.max_steps; }
  double gamma() const override { return cfg_.gamma; }
  const CartPoleConfig& config() const { return cfg_; }

  State reset(std::mt19937_64& rng) const override {
    State s(4);
    for (auto& v : s) v = uniform(rng, -0.05, 0.05);
    return s;
  }

  /// Angular and linear accelerations for the given state and action.
  std::pair<double, double> accelerations(const State& s, int action) const {
    double total_mass = cfg_.cart_mass + cfg_.pole_mass;
    double pml = cfg_.pole_mass * cfg_.half_length;
    double f = action == 1 ? cfg_.force : -cfg_.force;
    double cos_t = std::cos(s[2]);
    double sin_t = std::sin(s[2]);
    double temp = (f + pml * s[3] * s[3] * sin_t) / total_mass;
    double theta_acc = (cfg_.gravity * sin_t - cos_t * temp) /
                       (cfg_.half_length * (4.0 / 3.0 - cfg_.pole_mass * cos_t * cos_t / total_mass));
    double x_acc = temp - pml * theta_acc * cos_t / total_mass;
    return {theta_acc, x_acc};
  }

  StepResult step(const State& s, int action, std::mt19937_64&) const override {
    if (action != 0 && action != 1) throw DataError("invalid cartpole action index " + std::to_string(action));
    auto [theta_acc, x_acc] = accelerations(s, action);
    State n(4);
    n[0] = s[0] + cfg_.dt * s[1];
    n[1] = s[1] + cfg_.dt * x_acc;
    n[2] = s[2] + cfg_.dt * s[3];
    n[3] = s[3] + cfg_.dt * theta_acc;
    bool failed = std::abs(n[0]) > cfg_.x_threshold || std::abs(n[2]) > cfg_.theta_threshold;
    return {n, 1.0, failed};
  }

  FeatureMap features(const State& s) const override {
    return {{"x", s[0]}, {"x_dot", s[1]}, {"theta", s[2]}, {"theta_dot", s[3]}};
  }

  /// Lean-following heuristic: push toward the side the pole is falling.
  std::vector<double> action_scores(const State& s) const override {
    double u = s[2] + 0.5 * s[3];
    return {-u, u};
  }

 private:
  CartPoleConfig cfg_;
};

// ---------------------------------------------------------------------------
// Point mass

struct PointMassConfig {
  double dt = 0.1;
  double action_cost = 0.1;
  int horizon = 50;
  double gamma = 0.99;

  static PointMassConfig from_json(const Json& j) {
    PointMassConfig c;
    c.dt = j.value("dt", c.dt);
    c.horizon = j.value("horizon", c.horizon);
    c.gamma = j.value("gamma", c.gamma);
    return c;
  }
};

/// 1-D double integrator with force in [-1, 1] and quadratic cost.
class PointMass : public Environment {
 public:
  explicit PointMass(PointMassConfig cfg = {}) : cfg_(cfg) {}

  std::string name() const override { return "pointmass"; }
  bool continuous_actions() const override { return true; }
  std::vector<std::string> action_feature_names() const override { return {"force"}; }
  int max_steps() const override { return cfg_.horizon; }
  double gamma() const override { return cfg_.gamma; }
  const PointMassConfig& config() const { return cfg_; }

  State reset(std::mt19937_64& rng) const override { return {uniform(rng, -1.0, 1.0), 0.0}; }

  StepResult step_continuous(const State& s, const std::vector<double>& action, std::mt19937_64&) const override {
    if (action.size() != 1 || !std::isfinite(action[0])) throw DataError("pointmass expects one finite force");
    double a = std::clamp(action[0], -1.0, 1.0);
    double reward = -(s[0] * s[0] + cfg_.action_cost * a * a);
    return {{s[0] + cfg_.dt * s[1], s[1] + cfg_.dt * a}, reward, false};
  }

  FeatureMap features(const State& s) const override { return {{"pos", s[0]}, {"vel", s[1]}}; }

  /// Stationary discounted LQR gain: optimal unconstrained force is -K x.
  Eigen::RowVector2d lqr_gain() const {
    Eigen::Matrix2d a;
    a << 1.0, cfg_.dt, 0.0, 1.0;
    Eigen::Vector2d b(0.0, cfg_.dt);
    Eigen::Matrix2d q = Eigen::Matrix2d::Zero();
    q(0, 0) = 1.0;
    double r = cfg_.action_cost;
    double g = cfg_.gamma;
    Eigen::Matrix2d p = q;
    for (int i = 0; i < 100000; ++i) {
      double denom = r + g * b.dot(p * b);
      Eigen::RowVector2d k = g * (b.transpose() * p * a) / denom;
      Eigen::Matrix2d next = q + g * a.transpose() * p * a - g * a.transpose() * p * b * k;
      if ((next - p).cwiseAbs().maxCoeff() < 1e-13) {
        p = next;
        break;
      }
      p = next;
    }
    double denom = r + g * b.dot(p * b);
    return g * (b.transpose() * p * a) / denom;
  }

  /// LQR controller clipped to the action bounds.
  double oracle_action(const State& s) const {
    Eigen::RowVector2d k = lqr_gain();
    return std::clamp(-(k[0] * s[0] + k[1] * s[1]), -1.0, 1.0);
  }

 private:
  PointMassConfig cfg_;
};

// ---------------------------------------------------------------------------
// Chain MDP fixture

struct ChainMdpConfig {
  int n = 5;
  double move_prob = 0.9;
  double state_reward = 0.1;  // reward per step = state_reward * s
  double left_bonus = 0.2;    // extra reward for choosing "left"
  double goal_reward = 1.0;
  double gamma = 0.9;
  double behavior_right = 0.5;
  double target_right = 0.7;
  int max_steps = 1000;
};

/// States 0..n-1, start 0, state n-1 terminal. "right" moves up the chain
/// and "left" moves down (clamped at 0); a move succeeds with probability
/// move_prob, otherwise the agent stays.
class ChainEnv : public Environment {
 public:
  explicit ChainEnv(ChainMdpConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.n < 2) throw DataError("chain needs at least 2 states");
  }

  std::string name() const override { return "chain"; }
  std::vector<std::string> actions() const override { return {"left", "right"}; }
  int max_steps() const override { return cfg_.max_steps; }
  double gamma() const override { return cfg_.gamma; }
  const ChainMdpConfig& config() const { return cfg_; }

  State reset(std::mt19937_64&) const override { return {0.0}; }

  int target_of(int s, int a) const { return a == 1 ? s + 1 : std::max(s - 1, 0); }

  double step_reward(int s, int a) const { return cfg_.state_reward * s + (a == 0 ? cfg_.left_bonus : 0.0); }

  StepResult step(const State& st, int action, std::mt19937_64& rng) const override {
    if (action != 0 && action != 1) throw DataError("invalid chain action index " + std::to_string(action));
    int s = static_cast<int>(st.at(0));
    int next = uniform01(rng) < cfg_.move_prob ? target_of(s, action) : s;
    bool goal = next == cfg_.n - 1;
    return {{static_cast<double>(next)}, step_reward(s, action) + (goal ? cfg_.goal_reward : 0.0), goal};
  }

  FeatureMap features(const State& s) const override {
    FeatureMap f;
    for (int i = 0; i < cfg_.n; ++i) f["s_" + std::to_string(i)] = static_cast<int>(s.at(0)) == i ? 1.0 : 0.0;
    return f;
  }

  int state_of(const FeatureMap& f) const {
    for (int i = 0; i < cfg_.n; ++i) {
      auto it = f.find("s_" + std::to_string(i));
      if (it != f.end() && it->second > 0.5) return i;
    }
    throw DataError("chain state features missing");
  }

  TabularMdp tabular() const {
    TabularMdp m;
    m.num_states = cfg_.n;
    m.num_actions = 2;
    m.outcomes.assign(static_cast<std::size_t>(cfg_.n), std::vector<std::vector<Outcome>>(2));
    m.absorbing.assign(static_cast<std::size_t>(cfg_.n), false);
    m.absorbing[static_cast<std::size_t>(cfg_.n - 1)] = true;
    for (int s = 0; s + 1 < cfg_.n; ++s) {
      for (int a = 0; a < 2; ++a) {
        auto& out = m.outcomes[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
        int t = target_of(s, a);
        std::map<int, double> dist;
        dist[t] += cfg_.move_prob;
        dist[s] += 1.0 - cfg_.move_prob;
        for (const auto& [next, p] : dist) {
          if (p == 0.0) continue;
          bool goal = next == cfg_.n - 1;
          out.push_back(Outcome{next, p, step_reward(s, a) + (goal ? cfg_.goal_reward : 0.0), goal});
        }
      }
    }
    return m;
  }

 private:
  ChainMdpConfig cfg_;
};

/// Exact tables and values for the chain fixture.
struct ChainOracle {
  ChainMdpConfig config;
  TabularMdp mdp;
  Eigen::MatrixXd pi_b;
  Eigen::MatrixXd pi_e;
  Eigen::VectorXd v_b;
  Eigen::VectorXd v_e;
  Eigen::MatrixXd q_b;
  Eigen::MatrixXd q_e;

  double value_b() const { return v_b[0]; }
  double value_e() const { return v_e[0]; }

  Json to_json() const {
    Json transitions = Json::array();
    for (int s = 0; s < mdp.num_states; ++s) {
      for (int a = 0; a < mdp.num_actions; ++a) {
        for (const auto& o : mdp.at(s, a)) {
          transitions.push_back({{"state", s}, {"action", a}, {"next", o.next}, {"prob", o.prob},
                                 {"reward", o.reward}, {"terminal", o.terminal}});
        }
      }
    }
    auto mat = [](const Eigen::MatrixXd& m) {
      Json rows = Json::array();
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        Json row = Json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
      }
      return rows;
    };
    auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    return {{"n", config.n},         {"gamma", config.gamma},   {"actions", {"left", "right"}},
            {"transitions", transitions}, {"behavior_policy", mat(pi_b)}, {"target_policy", mat(pi_e)},
            {"v_behavior", vec(v_b)}, {"v_target", vec(v_e)},   {"q_behavior", mat(q_b)},
            {"q_target", mat(q_e)}};
  }
};

inline ChainOracle chain_mdp(const ChainMdpConfig& cfg = {}) {
  ChainEnv env(cfg);
  ChainOracle o;
  o.config = cfg;
  o.mdp = env.tabular();
  o.pi_b = Eigen::MatrixXd(cfg.n, 2);
  o.pi_e = Eigen::MatrixXd(cfg.n, 2);
  for (int s = 0; s < cfg.n; ++s) {
    o.pi_b.row(s) << 1.0 - cfg.behavior_right, cfg.behavior_right;
    o.pi_e.row(s) << 1.0 - cfg.target_right, cfg.target_right;
  }
  o.v_b = policy_evaluation(o.mdp, o.pi_b, cfg.gamma);
  o.v_e = policy_evaluation(o.mdp, o.pi_e, cfg.gamma);
  o.q_b = q_from_values(o.mdp, o.v_b, cfg.gamma);
  o.q_e = q_from_values(o.mdp, o.v_e, cfg.gamma);
  return o;
}

// ---------------------------------------------------------------------------
// Behavior policies and logged data

struct BehaviorPolicy {
  enum class Kind { Uniform, Epsilon, Softmax };
  Kind kind = Kind::Uniform;
  double param = 0.0;

  /// Parses "uniform", "eps:<v>" or "softmax:<t>".
  static BehaviorPolicy parse(const std::string& s) {
    BehaviorPolicy p;
    auto colon = s.find(':');
    std::string head = s.substr(0, colon);
    if (head == "uniform" && colon == std::string::npos) return p;
    if (colon == std::string::npos) throw UsageError("invalid policy '" + s + "'");
    double v = 0.0;
    try {
      v = std::stod(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw UsageError("invalid policy parameter in '" + s + "'");
    }
    if (head == "eps" || head == "epsilon") {
      if (!(v >= 0.0 && v <= 1.0)) throw UsageError("epsilon must be in [0, 1]");
      p.kind = Kind::Epsilon;
    } else if (head == "softmax") {
      if (!(v > 0.0)) throw UsageError("softmax temperature must be > 0");
      p.kind = Kind::Softmax;
    } else {
      throw UsageError("invalid policy '" + s + "'");
    }
    p.param = v;
    return p;
  }
};

/// Exact action distribution of a behavior policy over preference scores.
/// The epsilon-greedy base action is the first maximizer.
inline std::vector<double> behavior_propensities(const BehaviorPolicy& p, const std::vector<double>& scores) {
  const std::size_t n = scores.size();
  std::vector<double> out(n, 1.0 / static_cast<double>(n));
  if (p.kind == BehaviorPolicy::Kind::Epsilon) {
    std::size_t best = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
    for (auto& v : out) v = p.param / static_cast<double>(n);
    out[best] += 1.0 - p.param;
  } else if (p.kind == BehaviorPolicy::Kind::Softmax) {
    double m = *std::max_element(scores.begin(), scores.end());
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += out[i] = std::exp((scores[i] - m) / p.param);
    for (auto& v : out) v /= z;
  }
  return out;
}

using PropensityFn = std::function<std::vector<double>(const State&)>;

inline std::size_t sample_index(const std::vector<double>& probs, std::mt19937_64& rng) {
  double u = uniform01(rng);
  double c = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    c += probs[i];
    if (u < c) return i;
  }
  for (std::size_t i = probs.size(); i > 0; --i) {
    if (probs[i - 1] > 0.0) return i - 1;
  }
  return 0;
}

/// Rolls out one logged episode. Episode e uses its own derived stream so
/// episodes can be generated independently.
inline std::vector<RawRow> generate_episode(const Environment& env, const PropensityFn& policy,
                                            std::uint64_t seed, std::uint64_t episode) {
  std::mt19937_64 rng(derive_seed(seed, episode));
  std::string mdp_id = std::to_string(seed) + "-" + std::to_string(episode);
  std::vector<RawRow> rows;
  State s = env.reset(rng);
  std::vector<ActionValue> possible;
  for (const auto& a : env.actions()) possible.emplace_back(a);
  for (int t = 0; t < env.max_steps(); ++t) {
    RawRow row;
    row.mdp_id = mdp_id;
    row.sequence_number = t;
    row.state_features = env.features(s);
    StepResult res;
    if (env.continuous_actions()) {
      auto names = env.action_feature_names();
      std::vector<double> a(names.size());
      FeatureMap af;
      for (std::size_t i = 0; i < names.size(); ++i) af[names[i]] = a[i] = uniform(rng, -1.0, 1.0);
      row.action = af;
      row.action_probability = std::pow(0.5, static_cast<double>(names.size()));
      res = env.step_continuous(s, a, rng);
    } else {
      auto probs = policy(s);
      std::size_t a = sample_index(probs, rng);
      row.action = possible[a];
      row.action_probability = probs[a];
      row.possible_actions = possible;
      res = env.step(s, static_cast<int>(a), rng);
    }
    row.metrics = {{"reward", res.reward}};
    rows.push_back(std::move(row));
    if (res.terminal) break;
    s = std::move(res.next_state);
  }
  return rows;
}

inline PropensityFn make_propensity_fn(const Environment& env, const BehaviorPolicy& p) {
  if (env.continuous_actions() && p.kind != BehaviorPolicy::Kind::Uniform) {
    throw UsageError(env.name() + " supports only the uniform behavior policy");
  }
  return [&env, p](const State& s) { return behavior_propensities(p, env.action_scores(s)); };
}

/// Logs `episodes` episodes with exact propensities; mdp_id = "<seed>-<episode>".
inline std::vector<RawRow> generate_logged_data(const Environment& env, const BehaviorPolicy& policy,
                                                std::size_t episodes, std::uint64_t seed) {
  auto fn = make_propensity_fn(env, policy);
  std::vector<RawRow> rows;
  for (std::size_t e = 0; e < episodes; ++e) {
    auto ep = generate_episode(env, fn, seed, e);
    rows.insert(rows.end(), std::make_move_iterator(ep.begin()), std::make_move_iterator(ep.end()));
  }
  return rows;
}

/// Logs whole episodes until at least `min_rows` rows exist.
inline std::vector<RawRow> generate_logged_rows(const Environment& env, const BehaviorPolicy& policy,
                                                std::size_t min_rows, std::uint64_t seed) {
  auto fn = make_propensity_fn(env, policy);
  std::vector<RawRow> rows;
  for (std::size_t e = 0; rows.size() < min_rows; ++e) {
    auto ep = generate_episode(env, fn, seed, e);
    rows.insert(rows.end(), std::make_move_iterator(ep.begin()), std::make_move_iterator(ep.end()));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Policy value oracles

struct RolloutStats {
  double mean_return = 0.0;      // undiscounted
  double mean_discounted = 0.0;
  double stderr_discounted = 0.0;
  double stderr_return = 0.0;
  std::size_t episodes = 0;
};

using DiscretePolicy = std::function<int(const State&, std::mt19937_64&)>;
using ContinuousPolicy = std::function<std::vector<double>(const State&)>;

namespace env_detail {

inline RolloutStats summarize(const std::vector<double>& ret, const std::vector<double>& disc) {
  RolloutStats st;
  st.episodes = ret.size();
  auto n = static_cast<double>(ret.size());
  st.mean_return = pairwise_sum(ret) / n;
  st.mean_discounted = pairwise_sum(disc) / n;
  double ss_r = 0.0;
  double ss_d = 0.0;
  for (std::size_t i = 0; i < ret.size(); ++i) {
    ss_r += (ret[i] - st.mean_return) * (ret[i] - st.mean_return);
    ss_d += (disc[i] - st.mean_discounted) * (disc[i] - st.mean_discounted);
  }
  if (ret.size() > 1) {
    st.stderr_return = std::sqrt(ss_r / (n - 1.0) / n);
    st.stderr_discounted = std::sqrt(ss_d / (n - 1.0) / n);
  }
  return st;
}

}  // namespace env_detail

inline RolloutStats rollout(const Environment& env, const DiscretePolicy& policy, std::size_t episodes,
                            std::uint64_t seed) {
  std::vector<double> ret(episodes), disc(episodes);
  parallel_for(episodes, [&](std::size_t e) {
    std::mt19937_64 rng(derive_seed(seed, e, 1));
    State s = env.reset(rng);
    double g = 1.0;
    for (int t = 0; t < env.max_steps(); ++t) {
      auto res = env.step(s, policy(s, rng), rng);
      ret[e] += res.reward;
      disc[e] += g * res.reward;
      g *= env.gamma();
      if (res.terminal) break;
      s = std::move(res.next_state);
    }
  });
  return env_detail::summarize(ret, disc);
}

inline RolloutStats rollout_continuous(const Environment& env, const ContinuousPolicy& policy,
                                       std::size_t episodes, std::uint64_t seed) {
  std::vector<double> ret(episodes), disc(episodes);
  parallel_for(episodes, [&](std::size_t e) {
    std::mt19937_64 rng(derive_seed(seed, e, 1));
    State s = env.reset(rng);
    double g = 1.0;
    for (int t = 0; t < env.max_steps(); ++t) {
      auto res = env.step_continuous(s, policy(s), rng);
      ret[e] += res.reward;
      disc[e] += g * res.reward;
      g *= env.gamma();
      if (res.terminal) break;
      s = std::move(res.next_state);
    }
  });
  return env_detail::summarize(ret, disc);
}

/// Exact start-state value of a tabular policy (states x actions table).
inline double true_policy_value(const TabularMdp& mdp, const Eigen::MatrixXd& pi, double gamma, int start) {
  return policy_evaluation(mdp, pi, gamma)[start];
}

/// Monte Carlo value of a behavior policy on any discrete environment.
inline RolloutStats true_policy_value(const Environment& env, const BehaviorPolicy& p, std::size_t episodes,
                                      std::uint64_t seed) {
  auto fn = make_propensity_fn(env, p);
  return rollout(
      env, [&](const State& s, std::mt19937_64& rng) { return static_cast<int>(sample_index(fn(s), rng)); },
      episodes, seed);
}

/// Tabular policy table of a behavior policy on the gridworld.
inline Eigen::MatrixXd gridworld_policy_table(const Gridworld& g, const BehaviorPolicy& p) {
  Eigen::MatrixXd pi(g.cells(), 4);
  for (int c = 0; c < g.cells(); ++c) {
    auto probs = behavior_propensities(p, g.action_scores({static_cast<double>(c)}));
    for (int a = 0; a < 4; ++a) pi(c, a) = probs[static_cast<std::size_t>(a)];
  }
  return pi;
}

inline std::unique_ptr<Environment> make_environment(const std::string& name, const Json& cfg = Json::object()) {
  if (name == "gridworld") return std::make_unique<Gridworld>(GridworldConfig::from_json(cfg));
  if (name == "cartpole") return std::make_unique<CartPole>(CartPoleConfig::from_json(cfg));
  if (name == "pointmass") return std::make_unique<PointMass>(PointMassConfig::from_json(cfg));
  if (name == "chain") return std::make_unique<ChainEnv>();
  throw UsageError("unknown environment '" + name + "' (expected gridworld|cartpole|pointmass)");
}

}  // namespace batchrl
