#pragma once

// Epoch loop: shuffled minibatch updates, TD and MC losses, CPE on the
// held-out episodes at each epoch end, metric files and checkpoints.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "batchrl/cpe.hpp"
#include "batchrl/dataset.hpp"
#include "batchrl/model.hpp"

namespace batchrl {

struct TrainConfig {
  std::string algorithm = "dqn";
  Json model = Json::object();
  int epochs = 10;
  int batch_size = 64;
  double eval_fraction = 0.2;
  std::uint64_t seed = 0;
  Json reward_weights = Json{{"reward", 1.0}};
  bool cpe = true;
  std::string target_policy = "softmax:0.1";
  bool reward_model = false;
  EvaluatorConfig evaluator;
  CpeOptions cpe_options;

  Json to_json() const {
    return {{"algorithm", algorithm},
            {"model", model},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"eval_fraction", eval_fraction},
            {"seed", seed},
            {"reward_weights", reward_weights},
            {"cpe",
             {{"enabled", cpe},
              {"target_policy", target_policy},
              {"reward_model", reward_model},
              {"evaluator", evaluator.to_json()},
              {"options", cpe_options.to_json()}}}};
  }

  static TrainConfig from_json(const Json& j) {
    if (!j.is_object()) throw DataError("training config must be a JSON object");
    TrainConfig c;
    c.algorithm = j.value("algorithm", c.algorithm);
    parse_algorithm(c.algorithm);
    c.model = j.value("model", c.model);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.eval_fraction = j.value("eval_fraction", c.eval_fraction);
    c.seed = j.value("seed", c.seed);
    c.reward_weights = j.value("reward_weights", c.reward_weights);
    if (c.epochs < 0) throw DataError("epochs must be >= 0");
    if (c.batch_size < 1) throw DataError("batch_size must be >= 1");
    if (!(c.eval_fraction >= 0.0 && c.eval_fraction < 1.0)) throw DataError("eval_fraction must be in [0, 1)");
    Json cpe = j.value("cpe", Json::object());
    c.cpe = cpe.value("enabled", parse_algorithm(c.algorithm) == Algorithm::Dqn);
    c.target_policy = cpe.value("target_policy", c.target_policy);
    try {
      PolicyMode::parse(c.target_policy);
    } catch (const UsageError& e) {
      throw DataError(e.what());
    }
    c.reward_model = cpe.value("reward_model", c.reward_model);
    c.evaluator = EvaluatorConfig::from_json(cpe.value("evaluator", Json()));
    c.cpe_options = CpeOptions::from_json(cpe.value("options", Json::object()));
    return c;
  }
};

/// Training data aligned with the table rows.
struct TrainingData {
  std::vector<Episode> episodes;
  TransitionTable table;
  std::vector<const JoinedTransition*> rows;
  Matrix series_rewards;  // rows x series, shaped reward last
  std::vector<std::string> series;
};

/// Metric series for CPE: every metric in the data, then the shaped reward.
inline std::vector<std::string> cpe_series(const std::vector<JoinedTransition>& ts) {
  auto names = metric_names(ts);
  std::vector<std::string> out(names.begin(), names.end());
  out.push_back(kShapedReward);
  return out;
}

inline TrainingData prepare_training_data(const std::vector<JoinedTransition>& ts, const Model& model,
                                          const RewardWeights& weights, const std::vector<std::string>& series) {
  TrainingData d;
  d.episodes = canonical_episodes(ts);
  TableOptions opt;
  if (model.algorithm == Algorithm::Dqn || model.algorithm == Algorithm::ParametricDqn) {
    auto cfg = DqnConfig::from_json(model.model_config);
    opt.gamma = cfg.gamma;
    opt.multi_step = cfg.multi_step;
    opt.use_time_diff = cfg.use_time_diff;
  } else {
    opt.gamma = ActorCriticConfig::from_json(model.model_config).gamma;
  }
  const Preprocessor* app = model.action_pp ? &*model.action_pp : nullptr;
  d.table = build_table(d.episodes, model.state_pp, app, model.space, weights, opt);
  for (const auto& ep : d.episodes) {
    for (const auto& t : ep.transitions) d.rows.push_back(&t);
  }
  d.series = series;
  d.series_rewards = Matrix::Zero(static_cast<Eigen::Index>(d.rows.size()), static_cast<Eigen::Index>(series.size()));
  for (std::size_t r = 0; r < d.rows.size(); ++r) {
    for (std::size_t s = 0; s < series.size(); ++s) {
      double v = 0.0;
      if (series[s] == kShapedReward) {
        v = d.table.rewards[static_cast<Eigen::Index>(r)];
      } else {
        auto it = d.rows[r]->metrics.find(series[s]);
        if (it != d.rows[r]->metrics.end()) v = it->second;
      }
      d.series_rewards(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(s)) = v;
    }
  }
  return d;
}

/// Discounted return-to-go of each row within its episode.
inline Vector discounted_returns(const TransitionTable& t, double gamma) {
  Vector g = Vector::Zero(static_cast<Eigen::Index>(t.size()));
  double next = 0.0;
  for (std::size_t i = t.size(); i > 0; --i) {
    std::size_t r = i - 1;
    bool last = r + 1 >= t.size() || t.mdp_ids[r + 1] != t.mdp_ids[r];
    if (last) next = 0.0;
    next = t.rewards[static_cast<Eigen::Index>(r)] + gamma * next;
    g[static_cast<Eigen::Index>(r)] = next;
  }
  return g;
}

/// Mean squared error between Q(s_t, a_t) and the logged discounted return.
inline double mc_loss(const Vector& q, const Vector& returns) {
  if (q.size() == 0) return 0.0;
  std::vector<double> terms(static_cast<std::size_t>(q.size()));
  for (Eigen::Index i = 0; i < q.size(); ++i) terms[static_cast<std::size_t>(i)] = (q[i] - returns[i]) * (q[i] - returns[i]);
  return pairwise_sum(terms) / static_cast<double>(terms.size());
}

/// Possible-action indices of a transition (all actions when unlisted).
inline std::vector<int> possible_indices(const JoinedTransition& t, const ActionSpace& space) {
  std::vector<int> out;
  if (t.possible_actions) {
    for (const auto& a : *t.possible_actions) out.push_back(space.index(a.name()));
  } else {
    for (int a = 0; a < static_cast<int>(space.names.size()); ++a) out.push_back(a);
  }
  return out;
}

/// CPE samples for `rows`: target propensities from the policy's Q under
/// the model's target policy, Q-hat from the evaluation network.
inline std::vector<EvalStep> eval_samples(const Model& model, const TrainingData& d, const std::vector<std::size_t>& rows) {
  if (!model.evaluator) throw DataError("model has no CPE evaluation network");
  std::vector<EvalStep> out;
  if (rows.empty()) return out;
  Matrix s = rl_detail::gather_rows(d.table.states, rows);
  Matrix q = model.dqn().q_values(s);
  Matrix qe = model.evaluator->q(s);
  Matrix qr;
  if (model.reward_model) qr = model.reward_model->q(s);
  const int na = model.evaluator->num_actions();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const JoinedTransition& t = *d.rows[rows[i]];
    auto possible = possible_indices(t, model.space);
    int logged = model.space.index(t.action.name());
    auto pos = std::find(possible.begin(), possible.end(), logged);
    if (pos == possible.end()) throw DataError("logged action is not a possible action in mdp_id " + t.mdp_id);
    EvalStep st;
    st.mdp_id = t.mdp_id;
    st.ordinal = t.sequence_number_ordinal;
    st.action = static_cast<std::size_t>(pos - possible.begin());
    st.logged_propensity = t.action_probability;
    std::vector<double> qp;
    for (int a : possible) qp.push_back(q(ii, a));
    st.target_propensities = policy_propensities(qp, model.target_policy);
    st.terminal = t.terminal;
    for (std::size_t k = 0; k < d.series.size(); ++k) {
      const auto& name = d.series[k];
      st.values[name] = d.series_rewards(static_cast<Eigen::Index>(rows[i]), static_cast<Eigen::Index>(k));
      std::vector<double> qs, rs;
      for (int a : possible) {
        qs.push_back(qe(ii, static_cast<Eigen::Index>(k) * na + a));
        if (model.reward_model) rs.push_back(qr(ii, static_cast<Eigen::Index>(k) * na + a));
      }
      st.q[name] = std::move(qs);
      if (model.reward_model) st.reward_hat[name] = std::move(rs);
    }
    out.push_back(std::move(st));
  }
  return out;
}

struct EpochRecord {
  std::int64_t epoch = 0;
  double td_loss = 0.0;
  double mc_loss = 0.0;
  std::vector<CpeEstimate> cpe;

  Json to_json() const {
    Json c = Json::array();
    for (const auto& e : cpe) c.push_back(batchrl::to_json(e, epoch));
    return {{"epoch", epoch}, {"td_loss", td_loss}, {"mc_loss", mc_loss}, {"cpe", c}};
  }

  static EpochRecord from_json(const Json& j) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<std::int64_t>();
    r.td_loss = j.at("td_loss").get<double>();
    r.mc_loss = j.at("mc_loss").get<double>();
    auto num = [](const Json& v) { return v.is_null() ? std::nan("") : v.get<double>(); };
    for (const auto& e : j.at("cpe")) {
      CpeEstimate c;
      c.estimator = e.at("estimator").get<std::string>();
      c.metric = e.at("metric").get<std::string>();
      c.raw = num(e.at("raw"));
      c.normalized = num(e.at("normalized"));
      r.cpe.push_back(c);
    }
    return r;
  }

  /// Normalized shaped-reward estimate of `estimator` (NaN when absent).
  double normalized(const std::string& estimator) const {
    for (const auto& e : cpe) {
      if (e.metric == kShapedReward && e.estimator == estimator) return e.normalized;
    }
    return std::nan("");
  }
};

/// Per-epoch CSV (shaped-reward normalized estimates) and JSONL mirror.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::string dir) : dir_(std::move(dir)) {}

  static std::string csv_header() {
    std::string h = "epoch,td_loss,mc_loss";
    for (const auto& n : estimator_names()) h += "," + n;
    return h;
  }

  static std::string csv_row(const EpochRecord& r) {
    auto fmt = [](double x) {
      if (!std::isfinite(x)) return std::string();
      std::ostringstream os;
      os.precision(17);
      os << x;
      return os.str();
    };
    std::string row = std::to_string(r.epoch) + "," + fmt(r.td_loss) + "," + fmt(r.mc_loss);
    for (const auto& n : estimator_names()) row += "," + fmt(r.normalized(n));
    return row;
  }

  /// Rewrites the files from `history` (used when a run starts or resumes).
  void reset(const std::vector<EpochRecord>& history) const {
    std::ofstream csv(path("metrics.csv"), std::ios::trunc);
    std::ofstream jsonl(path("metrics.jsonl"), std::ios::trunc);
    if (!csv || !jsonl) throw DataError("cannot write metrics in " + dir_);
    csv << csv_header() << '\n';
    for (const auto& r : history) {
      csv << csv_row(r) << '\n';
      jsonl << r.to_json().dump() << '\n';
    }
    write_cpe(history);
  }

  void append(const EpochRecord& r, const std::vector<EpochRecord>& history) const {
    std::ofstream csv(path("metrics.csv"), std::ios::app);
    std::ofstream jsonl(path("metrics.jsonl"), std::ios::app);
    if (!csv || !jsonl) throw DataError("cannot append metrics in " + dir_);
    csv << csv_row(r) << '\n';
    jsonl << r.to_json().dump() << '\n';
    if (!csv || !jsonl) throw DataError("failed writing metrics in " + dir_);
    write_cpe(history);
  }

  std::string path(const std::string& name) const { return (std::filesystem::path(dir_) / name).string(); }

 private:
  void write_cpe(const std::vector<EpochRecord>& history) const {
    Json all = Json::array();
    std::ofstream csv(path("cpe.csv"), std::ios::trunc);
    csv << "epoch,metric,estimator,raw,normalized\n";
    for (const auto& r : history) {
      for (const auto& e : r.cpe) {
        all.push_back(batchrl::to_json(e, r.epoch));
        auto fmt = [](double x) {
          std::ostringstream os;
          os.precision(17);
          if (std::isfinite(x)) os << x;
          return os.str();
        };
        csv << r.epoch << ',' << e.metric << ',' << e.estimator << ',' << fmt(e.raw) << ',' << fmt(e.normalized) << '\n';
      }
    }
    std::ofstream f(path("cpe_report.json"), std::ios::trunc);
    f << all.dump(2) << '\n';
    if (!f || !csv) throw DataError("failed writing CPE report in " + dir_);
  }

  std::string dir_;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<NormalizationSpec> specs, const std::vector<JoinedTransition>& transitions)
      : cfg_(std::move(cfg)) {
    if (transitions.empty()) throw DataError("no transitions to train on");
    Algorithm algo = parse_algorithm(cfg_.algorithm);
    auto map_kind = algo == Algorithm::ParametricDqn ? ActionSpace::Kind::Parametric : ActionSpace::Kind::Continuous;
    auto space = ActionSpace::infer(transitions, map_kind);
    weights_ = reward_weights_from_json(cfg_.reward_weights, metric_names(transitions));
    std::vector<std::string> series;
    if (cfg_.cpe) {
      if (algo != Algorithm::Dqn) throw DataError("CPE is available for dqn only; set cpe.enabled to false");
      series = cpe_series(transitions);
    }
    model_ = Model::create(algo, cfg_.model, std::move(specs), std::move(space), cfg_.seed, series,
                           PolicyMode::parse(cfg_.target_policy), cfg_.evaluator, cfg_.reward_model);
    data_ = prepare_training_data(transitions, model_, weights_, series);
    auto held = split_by_mdp(data_.table.mdp_ids, cfg_.eval_fraction, derive_seed(cfg_.seed, 0x73706c6974));
    for (std::size_t r = 0; r < data_.table.size(); ++r) {
      (held.contains(data_.table.mdp_ids[r]) ? eval_rows_ : train_rows_).push_back(r);
    }
    if (train_rows_.empty()) throw DataError("no training rows after the evaluation split");
    returns_ = discounted_returns(data_.table, model_.gamma());
  }

  /// Warm start: parameters, optimizer state, epoch counter and history.
  void resume(const Checkpoint& ck) {
    const Json& h = ck.header;
    if (h.at("algorithm").get<std::string>() != cfg_.algorithm) {
      throw DataError("checkpoint algorithm '" + h.at("algorithm").get<std::string>() + "' differs from the config");
    }
    if (h.at("norm_digest").get<std::string>() != model_.norm_digest()) {
      throw DataError("checkpoint was trained with different normalization specs");
    }
    restore_agent(ck, "policy", *model_.agent);
    if (model_.evaluator) restore_agent(ck, "evaluator", *model_.evaluator);
    if (model_.reward_model) restore_agent(ck, "reward_model", *model_.reward_model);
    epoch_ = h.value("epoch", std::int64_t{0});
    history_.clear();
    for (const auto& r : h.value("history", Json::array())) history_.push_back(EpochRecord::from_json(r));
  }

  Checkpoint checkpoint() const {
    Checkpoint ck = model_.to_checkpoint();
    ck.header["epoch"] = epoch_;
    ck.header["train_config"] = cfg_.to_json();
    Json hist = Json::array();
    for (const auto& r : history_) hist.push_back(r.to_json());
    ck.header["history"] = hist;
    return ck;
  }

  /// Runs epochs until `cfg.epochs` are complete. With `out_dir` set, the
  /// checkpoint and metrics are written after every epoch; on a numerical
  /// failure the last good checkpoint stays in place.
  void run(const std::string& out_dir = {}) {
    std::optional<MetricsWriter> writer;
    std::string ckpt_path;
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      writer.emplace(out_dir);
      writer->reset(history_);
      ckpt_path = writer->path("checkpoint.bin");
      save_checkpoint(ckpt_path, checkpoint());
    }
    while (epoch_ < cfg_.epochs) {
      EpochRecord rec = run_epoch(epoch_ + 1);
      ++epoch_;
      history_.push_back(rec);
      if (writer) {
        save_checkpoint(ckpt_path, checkpoint());
        writer->append(rec, history_);
      }
      log_info("epoch " + std::to_string(rec.epoch) + " td_loss " + std::to_string(rec.td_loss) + " mc_loss " +
               std::to_string(rec.mc_loss));
    }
  }

  /// One pass over the training rows in a seeded shuffle.
  EpochRecord run_epoch(std::int64_t epoch) {
    std::vector<std::size_t> order = train_rows_;
    std::mt19937_64 rng(derive_seed(cfg_.seed, static_cast<std::uint64_t>(epoch), 0x7368756666));
    shuffle_in_place(order, rng);
    const auto bs = static_cast<std::size_t>(cfg_.batch_size);
    std::vector<double> losses;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::span<const std::size_t> batch(order.data() + start, std::min(bs, order.size() - start));
      losses.push_back(model_.agent->train_step(data_.table, batch));
      if (model_.evaluator) update_evaluators(batch);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.td_loss = losses.empty() ? 0.0 : pairwise_sum(losses) / static_cast<double>(losses.size());
    const auto& mc_rows = eval_rows_.empty() ? train_rows_ : eval_rows_;
    rec.mc_loss = mc_loss(model_.logged_q(data_.table, mc_rows), gather(returns_, mc_rows));
    if (!std::isfinite(rec.td_loss) || !std::isfinite(rec.mc_loss)) {
      throw NumericalError("loss became non-finite in epoch " + std::to_string(epoch));
    }
    if (model_.evaluator && !eval_rows_.empty()) {
      auto ds = collect_and_sort(eval_samples(model_, data_, eval_rows_), model_.gamma());
      CpeOptions opt = cfg_.cpe_options;
      opt.seed = derive_seed(cfg_.seed, static_cast<std::uint64_t>(epoch), 0x637065);
      std::vector<std::string> failures;
      rec.cpe = cpe_report(ds, opt, &failures);
      for (const auto& f : failures) log_warning("epoch " + std::to_string(epoch) + ": " + f);
    }
    return rec;
  }

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const TrainingData& data() const { return data_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  const std::vector<std::size_t>& train_rows() const { return train_rows_; }
  const std::vector<std::size_t>& eval_rows() const { return eval_rows_; }
  std::int64_t epoch() const { return epoch_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  static Vector gather(const Vector& v, const std::vector<std::size_t>& rows) {
    Vector out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[static_cast<Eigen::Index>(rows[i])];
    return out;
  }

  void update_evaluators(std::span<const std::size_t> batch) {
    const auto& t = data_.table;
    Matrix next = rl_detail::gather_rows(t.next_states, batch);
    Matrix q = model_.dqn().q_values(next);
    Matrix probs = Matrix::Zero(q.rows(), q.cols());
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      std::size_t r = batch[static_cast<std::size_t>(i)];
      if (t.terminal[r]) continue;
      Eigen::RowVectorXd mask = t.next_mask.row(static_cast<Eigen::Index>(r));
      auto p = masked_propensities(q.row(i), t.has_next_mask[r] ? &mask : nullptr, model_.target_policy);
      for (Eigen::Index a = 0; a < q.cols(); ++a) probs(i, a) = p[static_cast<std::size_t>(a)];
    }
    model_.evaluator->update(t, data_.series_rewards, batch, probs);
    if (model_.reward_model) model_.reward_model->update(t, data_.series_rewards, batch, probs);
  }

  TrainConfig cfg_;
  RewardWeights weights_;
  Model model_;
  TrainingData data_;
  std::vector<std::size_t> train_rows_;
  std::vector<std::size_t> eval_rows_;
  Vector returns_;
  std::int64_t epoch_ = 0;
  std::vector<EpochRecord> history_;
};

}  // namespace batchrl
