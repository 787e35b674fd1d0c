#pragma once

// End-to-end conditional meta-learning: meta-train (scoring model plus an
// optional unconditional initialization) and per-target adaptation on the
// task-weighted objective.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tasml/dataset_kernel.hpp"
#include "tasml/errors.hpp"
#include "tasml/ls_meta_learn.hpp"
#include "tasml/meta_objectives.hpp"
#include "tasml/parallel.hpp"
#include "tasml/rng.hpp"
#include "tasml/taskgen.hpp"

namespace tasml {

struct DriverConfig {
  KernelConfig kernel;
  double lambda = 1e-8;
  double lambda_theta = 0.1;
  double l2_theta = 1e-4;
  double learning_rate = 1e-4;
  double init_learning_rate = 1e-4;
  int init_steps = 1000;
  bool random_init = false;
  std::size_t meta_batch = 12;
  OptimizerMode optimizer = OptimizerMode::adam;
  std::uint64_t seed = 0;
};

inline void validate(const DriverConfig& c) {
  validate(c.kernel);
  if (!(c.lambda > 0.0)) throw ConfigInvalid("lambda", "must be > 0");
  if (!(c.lambda_theta > 0.0)) throw ConfigInvalid("lambda_theta", "must be > 0");
  if (!(c.l2_theta >= 0.0)) throw ConfigInvalid("l2_theta", "must be >= 0");
  if (!(c.learning_rate > 0.0)) throw ConfigInvalid("learning_rate", "must be > 0");
  if (!(c.init_learning_rate > 0.0)) throw ConfigInvalid("init_learning_rate", "must be > 0");
  if (c.init_steps < 0) throw ConfigInvalid("init_steps", "must be >= 0");
  if (c.meta_batch < 1) throw ConfigInvalid("meta_batch", "must be >= 1");
}

struct TrainedSystem {
  ScoringModel scoring;
  MetaParams theta0;
  std::shared_ptr<const MetaSet> train;
  DriverConfig config;
  std::vector<double> init_loss_history; // ERM objective per initialization step
};

/// Fits the scoring model on the training support sets and, unless
/// random_init is set, runs init_steps of unconditional ERM from a seeded
/// random start.
inline TrainedSystem meta_train(std::shared_ptr<const MetaSet> train, const DriverConfig& cfg) {
  validate(cfg);
  if (!train || train->empty()) throw EmptyDataset("meta_train: empty training set");
  TrainedSystem sys;
  sys.config = cfg;
  sys.train = train;
  sys.scoring = fit_scoring(*train, cfg.kernel, cfg.lambda);

  Rng init_rng = make_rng(cfg.seed, {kTagThetaInit});
  MetaParams theta = MetaParams::random(train->tasks.front().support.dim(), init_rng);
  if (!cfg.random_init && cfg.init_steps > 0) {
    Rng batch_rng = make_rng(cfg.seed, {kTagErmBatches});
    auto state = OptimizerState::create(theta.flat_size(), cfg.init_learning_rate, cfg.optimizer);
    std::vector<const Task*> batch(cfg.meta_batch);
    sys.init_loss_history.reserve(static_cast<std::size_t>(cfg.init_steps));
    for (int step = 0; step < cfg.init_steps; ++step) {
      const auto idx = sample_batch(batch_rng, train->size(), cfg.meta_batch);
      for (std::size_t b = 0; b < idx.size(); ++b) batch[b] = &train->tasks[idx[b]];
      const auto obj = erm_objective(theta, batch, cfg.lambda_theta, cfg.l2_theta);
      sys.init_loss_history.push_back(obj.loss);
      std::tie(state, theta) = optimizer_step(std::move(state), theta, obj.grad);
    }
  }
  sys.theta0 = std::move(theta);
  return sys;
}

struct AdaptOptions {
  int steps = 100;         // J
  std::size_t top_m = 500; // M
  double beta1 = 1.0;
  double beta2 = 1.0;
  bool trace_eval = true;     // evaluate target query accuracy at every step
  std::uint64_t task_key = 0; // distinguishes the batch stream of each target
};

struct TraceRecord {
  int step = 0;
  double objective = 0.0;
  std::optional<double> accuracy; // target query accuracy; absent when not traced
};

struct AdaptationTrace {
  std::vector<TraceRecord> records;
  MetaParams final_theta;
  TaskWeights weights;
  double final_accuracy = 0.0;
  double initial_accuracy = 0.0;
  double scoring_seconds = 0.0;
  double loop_seconds = 0.0;
};

inline void validate(const AdaptOptions& o) {
  if (o.steps < 0) throw ConfigInvalid("steps", "must be >= 0");
  if (o.top_m < 1) throw ConfigInvalid("top_m", "must be >= 1");
  if (!(o.beta1 >= 0.0)) throw ConfigInvalid("beta1", "must be >= 0");
  if (!(o.beta2 >= 0.0)) throw ConfigInvalid("beta2", "must be >= 0");
}

/// Builds the objective for one adaptation step. The mini-batch is drawn
/// uniformly with replacement from the selected tasks and each term is scaled
/// by M/B, so the batch sum is unbiased for the full weighted sum. Only the
/// target's support set enters the objective.
inline WeightedObjectiveSpec adaptation_objective(const TrainedSystem& sys, const TaskWeights& weights,
                                                  const Dataset& target_support, int target_ways,
                                                  const AdaptOptions& opts, Rng& rng) {
  WeightedObjectiveSpec spec;
  spec.beta1 = opts.beta1;
  spec.beta2 = opts.beta2;
  spec.lambda_theta = sys.config.lambda_theta;
  spec.l2_theta = sys.config.l2_theta;
  spec.target_support = &target_support;
  spec.target_ways = target_ways;
  const auto& sel = weights.selected;
  const double scale = static_cast<double>(sel.size()) / static_cast<double>(sys.config.meta_batch);
  for (auto b : sample_batch(rng, sel.size(), sys.config.meta_batch))
    spec.weighted_tasks.push_back({&sys.train->tasks[sel[b].first], scale * sel[b].second});
  return spec;
}

/// Scores the training tasks against target.support, keeps the top M, and
/// runs J optimizer steps from theta0 on the weighted objective.
inline AdaptationTrace adapt(const TrainedSystem& sys, const Task& target, const AdaptOptions& opts) {
  validate(opts);
  using clock = std::chrono::steady_clock;
  AdaptationTrace trace;

  const auto t0 = clock::now();
  trace.weights = top_m_filter(score(sys.scoring, target.support), opts.top_m);
  const auto t1 = clock::now();
  trace.scoring_seconds = std::chrono::duration<double>(t1 - t0).count();

  // The query set is held out: only this copy of the support set is visible
  // to the objective.
  const Dataset target_support = target.support;
  const int ways = target.ways > 0 ? target.ways : infer_ways(target.support, &target.query);
  auto eval = [&](const MetaParams& theta) {
    return task_loss(theta, target.support, target.query, sys.config.lambda_theta, ways).accuracy;
  };

  Rng rng = make_rng(sys.config.seed, {kTagAdapt, opts.task_key});
  MetaParams theta = sys.theta0;
  auto state = OptimizerState::create(theta.flat_size(), sys.config.learning_rate, sys.config.optimizer);
  trace.records.reserve(static_cast<std::size_t>(opts.steps) + 1);

  const auto t2 = clock::now();
  for (int step = 0; step <= opts.steps; ++step) {
    TraceRecord rec;
    rec.step = step;
    if (opts.trace_eval) rec.accuracy = eval(theta);
    const auto spec = adaptation_objective(sys, trace.weights, target_support, ways, opts, rng);
    const auto obj = weighted_objective(theta, spec);
    rec.objective = obj.loss;
    trace.records.push_back(rec);
    if (step < opts.steps) std::tie(state, theta) = optimizer_step(std::move(state), theta, obj.grad);
  }
  trace.loop_seconds = std::chrono::duration<double>(clock::now() - t2).count();

  trace.initial_accuracy = trace.records.front().accuracy ? *trace.records.front().accuracy : eval(sys.theta0);
  trace.final_accuracy = trace.records.back().accuracy ? *trace.records.back().accuracy : eval(theta);
  trace.final_theta = std::move(theta);
  return trace;
}

struct EvaluationSummary {
  double mean_final = 0.0;
  double std_final = 0.0;
  double mean_initial = 0.0; // step 0, i.e. the unconditional system
  double std_initial = 0.0;
  std::optional<double> mode_retrieval; // mean share of selected tasks in the target's mode
  double steps_per_sec = 0.0;           // NaN when J = 0
  double mean_scoring_seconds = 0.0;
  std::vector<AdaptationTrace> traces;
};

/// Population mean and standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size()))};
}

/// Share of the selected training tasks whose mode matches the target's.
inline std::optional<double> mode_match_share(const TrainedSystem& sys, const Task& target,
                                              const TaskWeights& weights) {
  if (!target.mode_id || weights.selected.empty()) return std::nullopt;
  std::size_t same = 0;
  for (const auto& [i, w] : weights.selected) {
    const auto& m = sys.train->tasks[i].mode_id;
    if (!m) return std::nullopt;
    if (*m == *target.mode_id) ++same;
  }
  return static_cast<double>(same) / static_cast<double>(weights.selected.size());
}

/// Adapts to every test task (in parallel, results in task order).
inline EvaluationSummary evaluate(const TrainedSystem& sys, const MetaSet& test, AdaptOptions opts,
                                  unsigned threads = worker_count()) {
  if (test.empty()) throw EmptyDataset("evaluate: empty test set");
  EvaluationSummary out;
  out.traces.resize(test.size());
  parallel_for(test.size(), threads, [&](std::size_t i) {
    AdaptOptions o = opts;
    o.task_key = i;
    out.traces[i] = adapt(sys, test.tasks[i], o);
  });

  std::vector<double> finals, initials, shares;
  double loop = 0.0;
  double scoring = 0.0;
  bool shares_known = true;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& tr = out.traces[i];
    finals.push_back(tr.final_accuracy);
    initials.push_back(tr.initial_accuracy);
    loop += tr.loop_seconds;
    scoring += tr.scoring_seconds;
    if (auto s = mode_match_share(sys, test.tasks[i], tr.weights)) shares.push_back(*s);
    else shares_known = false;
  }
  std::tie(out.mean_final, out.std_final) = mean_std(finals);
  std::tie(out.mean_initial, out.std_initial) = mean_std(initials);
  if (shares_known) out.mode_retrieval = mean_std(shares).first;
  const double total_steps = static_cast<double>(opts.steps) * static_cast<double>(test.size());
  out.steps_per_sec = opts.steps > 0 && loop > 0.0 ? total_steps / loop : std::nan("");
  out.mean_scoring_seconds = scoring / static_cast<double>(test.size());
  return out;
}

} // namespace tasml
