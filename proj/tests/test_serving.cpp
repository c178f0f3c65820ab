#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "batchrl/experiment.hpp"
#include "batchrl/serving.hpp"

using namespace batchrl;

namespace {

std::string temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "batchrl_serving";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(f, line);) out.push_back(line);
  return out;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::trunc);
  for (const auto& l : lines) f << l << '\n';
}

/// Gridworld model trained once with the shipped experiment settings.
struct Trained {
  Gridworld env;
  std::vector<JoinedTransition> transitions;
  std::unique_ptr<Trainer> trainer;
  std::string checkpoint_path;
};

const Trained& trained() {
  static const Trained t = [] {
    setenv("BATCHRL_THREADS", "0", 1);
    auto exp = default_experiment("gridworld");
    Trained out{Gridworld(GridworldConfig::from_json(exp.env_config)), {}, nullptr, temp_path("grid.ckpt")};
    out.transitions =
        timeline_join(generate_logged_rows(out.env, BehaviorPolicy::parse(exp.behavior), exp.transitions, 7));
    std::vector<const FeatureMap*> states;
    for (const auto& tr : out.transitions) states.push_back(&tr.state_features);
    auto cfg = TrainConfig::from_json(exp.train);
    cfg.seed = 7;
    out.trainer = std::make_unique<Trainer>(cfg, fit_normalization(states), out.transitions);
    out.trainer->run();
    save_checkpoint(out.checkpoint_path, out.trainer->checkpoint());
    return out;
  }();
  return t;
}

ScoringRequest cell_request(const Gridworld& env, int cell) {
  ScoringRequest r;
  r.state_features = env.features({static_cast<double>(cell)});
  return r;
}

/// Two-action send/drop model over one feature whose Q values are all 0.
Model flat_send_drop_model() {
  std::vector<FeatureMap> xs;
  for (int i = 0; i < 200; ++i) xs.push_back({{"x", 0.01 * i}});
  std::vector<const FeatureMap*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);
  ActionSpace space;
  space.names = {"send", "drop"};
  Model m = Model::create(Algorithm::Dqn, Json::object(), fit_normalization(ptrs), space, 1);
  for (auto& b : m.agent->blocks()) b.data->setZero();
  return m;
}

}  // namespace

TEST(Serving, CheckpointRoundTripIsBitIdentical) {
  const auto& t = trained();
  Scorer live(Model::from_checkpoint(t.trainer->checkpoint()), "live");
  Scorer loaded = Scorer::from_file(t.checkpoint_path);
  const Model& m = t.trainer->model();
  for (int c = 0; c < t.env.cells(); ++c) {
    auto req = cell_request(t.env, c);
    auto a = live.score(req);
    auto b = loaded.score(req);
    Matrix q = m.dqn().q_values(Matrix(m.state_pp.transform(req.state_features)));
    ASSERT_EQ(a.scores.size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(a.scores[k], b.scores[k]);
      EXPECT_EQ(a.scores[k], q(0, static_cast<Eigen::Index>(k)));
    }
    EXPECT_EQ(a.action.name(), b.action.name());
  }
  EXPECT_EQ(loaded.run_id(), Scorer::from_file(t.checkpoint_path).run_id());
}

TEST(Serving, NormalizationMatchesTraining) {
  const auto& t = trained();
  Scorer s = Scorer::from_file(t.checkpoint_path);
  const auto& data = t.trainer->data();
  for (std::size_t r = 0; r < data.rows.size(); r += 97) {
    Eigen::RowVectorXd served = s.features(data.rows[r]->state_features);
    EXPECT_TRUE(served == data.table.states.row(static_cast<Eigen::Index>(r))) << r;
  }
}

TEST(Serving, SameRequestSameDecisionDistinctKeys) {
  const auto& t = trained();
  Scorer s = Scorer::from_file(t.checkpoint_path);
  auto req = cell_request(t.env, 6);
  auto a = s.score(req);
  auto b = s.score(req);
  EXPECT_EQ(a.action.name(), b.action.name());
  EXPECT_EQ(a.decision.propensities, b.decision.propensities);
  EXPECT_NE(a.sample_key, b.sample_key);
  EXPECT_EQ(a.sample_key.rfind(s.run_id(), 0), 0u);
  EXPECT_EQ(a.model_version, b.model_version);
}

TEST(Serving, GreedyMatchesOptimalPolicy) {
  const auto& t = trained();
  Scorer s = Scorer::from_file(t.checkpoint_path);
  int open = 0;
  int agree = 0;
  const Eigen::MatrixXd& qs = t.env.q_star();
  for (int c = 0; c < t.env.cells(); ++c) {
    if (c == t.env.config().goal || t.env.is_wall(c)) continue;
    ++open;
    int a = t.env.action_index(s.score(cell_request(t.env, c)).action.name());
    if (qs(c, a) >= qs.row(c).maxCoeff() - 1e-9) ++agree;
  }
  EXPECT_GE(agree, static_cast<int>(std::ceil(0.95 * open))) << agree << "/" << open;
}

TEST(Serving, PropensitiesSumToOne) {
  const auto& t = trained();
  for (std::string policy : {"greedy", "epsilon:0.2", "softmax:0.05", "softmax:3"}) {
    ServingOptions opt;
    opt.policy = policy;
    opt.seed = 4;
    Scorer s = Scorer::from_file(t.checkpoint_path, opt);
    for (int c = 0; c < t.env.cells(); ++c) {
      auto req = cell_request(t.env, c);
      req.possible_actions = std::vector<ActionValue>{ActionValue("left"), ActionValue("up"), ActionValue("right")};
      auto r = s.score(req);
      const auto& p = r.decision.propensities;
      ASSERT_EQ(p.size(), 3u);
      EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12) << policy;
      EXPECT_EQ(r.decision.propensity, p[r.decision.chosen]);
      EXPECT_NE(r.action.name(), "down");
    }
  }
}

TEST(Serving, ThresholdSendsOnTies) {
  ServingOptions opt;
  opt.policy = "threshold";
  opt.threshold = 0.5;
  Scorer s(flat_send_drop_model(), "v", opt);
  ScoringRequest req;
  req.state_features = {{"x", 0.3}};
  auto r = s.score(req);
  ASSERT_EQ(r.scores.size(), 2u);
  EXPECT_EQ(r.scores[0], r.scores[1]);
  EXPECT_EQ(r.action.name(), "send");
  EXPECT_EQ(r.decision.propensity, 1.0);
  ASSERT_TRUE(r.threshold.has_value());
  EXPECT_EQ(*r.threshold, 0.5);

  opt.threshold = 0.51;
  Scorer strict(flat_send_drop_model(), "v", opt);
  EXPECT_EQ(strict.score(req).action.name(), "drop");
}

TEST(Serving, PidAdjustsThresholdPerWindow) {
  ServingOptions opt;
  opt.policy = "threshold";
  opt.pid_target = 0.3;
  opt.pid_window = 10;
  Scorer s(flat_send_drop_model(), "v", opt);
  ScoringRequest req;
  req.state_features = {{"x", 0.3}};
  for (int i = 0; i < 9; ++i) s.score(req);
  EXPECT_EQ(s.pid().threshold, 0.5);
  s.score(req);
  // Every request was sent, so the controller raises the threshold.
  EXPECT_GT(s.pid().threshold, 0.5);
  EXPECT_THROW(Scorer(flat_send_drop_model(), "v", ServingOptions{.pid_target = 0.3}), UsageError);
}

TEST(Serving, UnknownAndMissingFeatures) {
  const auto& t = trained();
  Scorer s = Scorer::from_file(t.checkpoint_path);
  FeatureMap f = t.env.features({3.0});
  FeatureMap extra = f;
  extra["unknown"] = 5.0;
  EXPECT_TRUE(s.features(extra) == s.features(f));
  FeatureMap partial = f;
  partial.erase("cell_0");
  EXPECT_TRUE(s.features(partial) == t.trainer->model().state_pp.transform(partial));
}

TEST(Serving, TopologyMismatchIsAnError) {
  const auto& t = trained();
  Checkpoint ck = t.trainer->checkpoint();
  for (auto& [name, v] : ck.blocks) {
    if (name == "policy/online") v.conservativeResize(v.size() - 1);
  }
  try {
    Model::from_checkpoint(ck);
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("topology"), std::string::npos) << e.what();
  }
}

TEST(BatchScore, EmptyInputGivesEmptyOutputs) {
  const auto& t = trained();
  Scorer s = Scorer::from_file(t.checkpoint_path);
  write_lines(temp_path("empty.jsonl"), {});
  auto st = s.batch_score(temp_path("empty.jsonl"), temp_path("empty_out.jsonl"), temp_path("empty_rows.jsonl"));
  EXPECT_EQ(st.scored, 0u);
  EXPECT_TRUE(st.errors.empty());
  EXPECT_TRUE(read_lines(temp_path("empty_out.jsonl")).empty());
  EXPECT_TRUE(read_lines(temp_path("empty_rows.jsonl")).empty());
}

TEST(BatchScore, OrderErrorsAndRejoin) {
  const auto& t = trained();
  Scorer s = Scorer::from_file(t.checkpoint_path);
  std::vector<std::string> lines;
  std::vector<int> cells{0, 1, 2, 7, 12, 13, 18};
  for (std::size_t i = 0; i < cells.size(); ++i) {
    Json j = {{"mdp_id", "ep"}, {"sequence_number", static_cast<int>(i)},
              {"state_features", Json(t.env.features({static_cast<double>(cells[i])}))}};
    lines.push_back(j.dump());
    if (i == 2) lines.push_back("{not json");
    if (i == 4) lines.push_back(R"({"mdp_id": "x"})");
  }
  write_lines(temp_path("req.jsonl"), lines);
  auto st = s.batch_score(temp_path("req.jsonl"), temp_path("resp.jsonl"), temp_path("rows.jsonl"));
  EXPECT_EQ(st.scored, cells.size());
  ASSERT_EQ(st.errors.size(), 2u);
  EXPECT_NE(st.errors[0].find("req.jsonl:4:"), std::string::npos) << st.errors[0];
  EXPECT_NE(st.errors[1].find("req.jsonl:7:"), std::string::npos) << st.errors[1];

  auto resp = read_lines(temp_path("resp.jsonl"));
  ASSERT_EQ(resp.size(), cells.size());
  for (std::size_t i = 0; i < resp.size(); ++i) {
    Json j = Json::parse(resp[i]);
    EXPECT_EQ(j.at("sequence_number"), static_cast<int>(i));
    EXPECT_EQ(j.at("propensities").size(), 4u);
  }

  // Attach simulated rewards and feed the rows back through the timeline.
  std::vector<RawRow> rows;
  for (const auto& line : read_lines(temp_path("rows.jsonl"))) {
    RawRow r = raw_row_from_json(Json::parse(line));
    int cell = t.env.cell_of(r.state_features);
    std::mt19937_64 rng;
    r.metrics = {{"reward", t.env.step({static_cast<double>(cell)}, t.env.action_index(r.action.name()), rng).reward}};
    rows.push_back(r);
  }
  auto joined = timeline_join(rows);
  ASSERT_EQ(joined.size(), cells.size());
  EXPECT_TRUE(joined.front().next_state_features.has_value());
  EXPECT_TRUE(joined.back().terminal);
}

TEST(BatchScore, MissingInputNamesPath) {
  const auto& t = trained();
  Scorer s = Scorer::from_file(t.checkpoint_path);
  try {
    s.batch_score("/nonexistent/requests.jsonl", temp_path("x.jsonl"));
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/requests.jsonl"), std::string::npos);
  }
}
