#pragma once

// Unconditional (mean over tasks) and weighted conditional meta-objectives,
// and the first-order optimizer that minimizes them.

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tasml/errors.hpp"
#include "tasml/ls_meta_learn.hpp"
#include "tasml/numerics.hpp"
#include "tasml/rng.hpp"
#include "tasml/taskgen.hpp"

namespace tasml {

struct ObjectiveValue {
  double loss = 0.0;
  Vector grad;
};

/// Mean task loss over the batch plus l2_theta * ||theta||^2.
inline ObjectiveValue erm_objective(const MetaParams& theta, std::span<const Task* const> batch,
                                    double lambda_theta = 0.1, double l2_theta = 1e-4) {
  if (batch.empty()) throw EmptyDataset("erm_objective: empty batch");
  std::vector<LossTerm> terms;
  terms.reserve(batch.size());
  for (const Task* t : batch) terms.push_back({&t->support, &t->query, 1.0, t->ways});
  auto r = batched_task_loss(theta, terms, lambda_theta, true);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  ObjectiveValue out;
  out.loss = r.loss * inv_n + l2_theta * theta.squared_norm();
  out.grad = r.grad * inv_n;
  if (l2_theta > 0.0) out.grad += (2.0 * l2_theta) * theta.flat();
  return out;
}

inline ObjectiveValue erm_objective(const MetaParams& theta, const std::vector<Task>& batch,
                                    double lambda_theta = 0.1, double l2_theta = 1e-4) {
  std::vector<const Task*> ptrs;
  for (const auto& t : batch) ptrs.push_back(&t);
  return erm_objective(theta, std::span<const Task* const>(ptrs), lambda_theta, l2_theta);
}

struct WeightedTask {
  const Task* task = nullptr;
  double weight = 0.0;
};

/// beta1 * sum_i w_i L(Alg(theta, D_i^tr), D_i^val)
///   + beta2 * L(Alg(theta, D), D) + l2_theta * ||theta||^2,
/// where D is the target support set. The target's query set is never part of
/// the objective.
struct WeightedObjectiveSpec {
  std::vector<WeightedTask> weighted_tasks;
  const Dataset* target_support = nullptr;
  int target_ways = 0;
  double beta1 = 1.0;
  double beta2 = 1.0;
  double lambda_theta = 0.1;
  double l2_theta = 1e-4;
};

inline void validate(const WeightedObjectiveSpec& spec) {
  if (!(spec.beta1 >= 0.0)) throw ConfigInvalid("beta1", "must be >= 0");
  if (!(spec.beta2 >= 0.0)) throw ConfigInvalid("beta2", "must be >= 0");
  if (!(spec.l2_theta >= 0.0)) throw ConfigInvalid("l2_theta", "must be >= 0");
  for (const auto& wt : spec.weighted_tasks)
    if (!wt.task || !(wt.weight >= 0.0)) throw ConfigInvalid("weights", "task weights must be >= 0");
  const bool has_target = spec.target_support && !spec.target_support->empty() && spec.beta2 > 0.0;
  if (spec.weighted_tasks.empty() && !has_target && spec.l2_theta == 0.0)
    throw ConfigInvalid("weighted_tasks", "objective has neither weighted tasks nor a target term");
}

inline ObjectiveValue weighted_objective(const MetaParams& theta, const WeightedObjectiveSpec& spec) {
  validate(spec);
  std::vector<LossTerm> terms;
  terms.reserve(spec.weighted_tasks.size() + 1);
  if (spec.beta1 > 0.0)
    for (const auto& wt : spec.weighted_tasks)
      terms.push_back({&wt.task->support, &wt.task->query, spec.beta1 * wt.weight, wt.task->ways});
  if (spec.beta2 > 0.0 && spec.target_support && !spec.target_support->empty())
    terms.push_back({spec.target_support, spec.target_support, spec.beta2, spec.target_ways});

  ObjectiveValue out;
  out.loss = spec.l2_theta * theta.squared_norm();
  out.grad = (2.0 * spec.l2_theta) * theta.flat();
  if (!terms.empty()) {
    auto r = batched_task_loss(theta, terms, spec.lambda_theta, true);
    out.loss += r.loss;
    out.grad += r.grad;
  }
  return out;
}

enum class OptimizerMode { adam, sgd };

inline OptimizerMode parse_optimizer_mode(const std::string& s) {
  if (s == "adam") return OptimizerMode::adam;
  if (s == "sgd") return OptimizerMode::sgd;
  throw ConfigInvalid("optimizer", "expected 'adam' or 'sgd', got '" + s + "'");
}

inline const char* to_string(OptimizerMode m) { return m == OptimizerMode::adam ? "adam" : "sgd"; }

struct OptimizerState {
  OptimizerMode mode = OptimizerMode::adam;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  Vector first_moment;
  Vector second_moment;

  static OptimizerState create(Eigen::Index n_params, double learning_rate, OptimizerMode mode) {
    OptimizerState s;
    s.mode = mode;
    s.learning_rate = learning_rate;
    s.first_moment = Vector::Zero(n_params);
    s.second_moment = Vector::Zero(n_params);
    return s;
  }
};

/// One update. SGD: theta - lr * grad. Adam: bias-corrected moments.
inline std::pair<OptimizerState, MetaParams> optimizer_step(OptimizerState state, const MetaParams& theta,
                                                            const Vector& grad) {
  Vector flat = theta.flat();
  if (grad.size() != flat.size())
    throw DimensionMismatch("optimizer_step: gradient has " + std::to_string(grad.size()) + " entries, theta has " +
                            std::to_string(flat.size()));
  if (state.first_moment.size() != flat.size() || state.second_moment.size() != flat.size())
    throw DimensionMismatch("optimizer_step: optimizer state does not match theta");
  ++state.step_count;
  if (state.mode == OptimizerMode::sgd) {
    flat -= state.learning_rate * grad;
  } else {
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad;
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    flat.array() -= state.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + state.eps);
  }
  return {std::move(state), MetaParams::from_flat(flat, theta.dim())};
}

/// Uniform draw with replacement of `batch_size` indices from [0, n).
inline std::vector<std::size_t> sample_batch(Rng& rng, std::size_t n, std::size_t batch_size) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

} // namespace tasml
