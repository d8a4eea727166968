#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "ssmt/optim.hpp"

namespace ssmt {

/// Builds a scalar loss on `tape` from tape-bound parameters.
using LossFn = std::function<Var(Tape&, const BoundParams&)>;

/// Parameters the inner loop must leave untouched.
using FrozenPredicate = std::function<bool(std::string_view)>;

struct MetaTask {
  LossFn support;
  LossFn query;
};

struct MetaStepConfig {
  double inner_lr = 0.01;
  double outer_lr = 0.001;
  int inner_steps = 1;
  FrozenPredicate frozen_in_inner = [](std::string_view) { return false; };
};

struct MetaStepStats {
  std::vector<double> query_losses;  // one per task, at the adapted parameters
  ParamMap meta_gradient;            // summed first-order query gradients
};

inline ParamMap zeros_like(const ParamMap& params) {
  ParamMap out;
  for (const auto& [name, t] : params) out.emplace(name, Tensor(t.rows(), t.cols()));
  return out;
}

/// `steps` plain gradient-descent updates on the support loss, starting from
/// an independent copy of `theta`. Frozen parameters keep their exact values.
inline ParamMap inner_adapt(const ParamMap& theta, const LossFn& support_loss, double lr, int steps,
                            const FrozenPredicate& frozen = [](std::string_view) { return false; }) {
  ParamMap adapted = theta;
  for (int s = 0; s < steps; ++s) {
    Tape tape;
    const BoundParams bound = bind_params(tape, adapted);
    const Var loss = support_loss(tape, bound);
    ParamMap grads = gradients(tape, loss, bound);
    for (auto& [name, g] : grads) {
      if (frozen(name)) g.fill(0.0);
    }
    adapted = sgd_step(adapted, grads, lr);
  }
  return adapted;
}

/// First-order MAML step: adapt to each task's support set, take the gradient
/// of its query loss at the adapted parameters, and descend on `theta` by the
/// summed query gradients. The adapted copies are discarded.
inline MetaStepStats meta_step(ParamMap& theta, std::span<const MetaTask> tasks, const MetaStepConfig& cfg) {
  if (tasks.empty()) throw std::invalid_argument("meta_step: no tasks");
  MetaStepStats stats;
  stats.meta_gradient = zeros_like(theta);
  for (const MetaTask& task : tasks) {
    if (!task.support || !task.query) throw std::invalid_argument("meta_step: task without support or query set");
    const ParamMap adapted = inner_adapt(theta, task.support, cfg.inner_lr, cfg.inner_steps, cfg.frozen_in_inner);
    Tape tape;
    const BoundParams bound = bind_params(tape, adapted);
    const Var loss = task.query(tape, bound);
    stats.query_losses.push_back(loss.value().item());
    const ParamMap grads = gradients(tape, loss, bound);
    for (auto& [name, acc] : stats.meta_gradient) {
      const Tensor& g = grads.at(name);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }
  }
  theta = sgd_step(theta, stats.meta_gradient, cfg.outer_lr);
  return stats;
}

}  // namespace ssmt
