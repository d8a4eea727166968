#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "ssmt/autodiff.hpp"

namespace ssmt {

/// Named parameter tensors. Ordered by name so iteration (and therefore every
/// serialized artifact) is deterministic.
using ParamMap = std::map<std::string, Tensor>;

/// Parameters placed on a tape as leaves.
using BoundParams = std::map<std::string, Var>;

inline BoundParams bind_params(Tape& tape, const ParamMap& params, bool requires_grad = true) {
  BoundParams out;
  for (const auto& [name, value] : params) out.emplace(name, tape.variable(value, requires_grad));
  return out;
}

/// Runs backward from `loss` and returns a gradient for every bound parameter
/// (zeros for parameters the loss does not depend on).
inline ParamMap gradients(Tape& tape, const Var& loss, const BoundParams& bound) {
  tape.backward(loss);
  ParamMap out;
  for (const auto& [name, var] : bound) out.emplace(name, tape.grad(var));
  return out;
}

namespace detail {
inline void check_keys(const ParamMap& params, const ParamMap& grads, const char* op) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument(std::string(op) + ": missing gradient for '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ShapeError(std::string(op) + ": gradient for '" + name + "' has shape " + shape_string(it->second.shape()) +
                       ", parameter " + shape_string(p.shape()));
    }
  }
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw std::invalid_argument(std::string(op) + ": gradient for unknown parameter '" + name + "'");
  }
}
}  // namespace detail

/// p <- p - lr * g for every parameter. Returns fresh values.
inline ParamMap sgd_step(const ParamMap& params, const ParamMap& grads, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  detail::check_keys(params, grads, "sgd_step");
  ParamMap out = params;
  for (auto& [name, p] : out) {
    const Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  }
  return out;
}

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam with per-parameter moment accumulators.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig config = {}) : config_(config) {
    if (!(config_.lr > 0.0)) throw std::invalid_argument("AdamOptimizer: learning rate must be positive");
  }

  [[nodiscard]] const AdamConfig& config() const noexcept { return config_; }
  [[nodiscard]] std::uint64_t steps() const noexcept { return step_; }
  [[nodiscard]] const ParamMap& first_moment() const noexcept { return m_; }
  [[nodiscard]] const ParamMap& second_moment() const noexcept { return v_; }

  ParamMap step(const ParamMap& params, const ParamMap& grads) {
    detail::check_keys(params, grads, "adam_step");
    ++step_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    ParamMap out = params;
    for (auto& [name, p] : out) {
      const Tensor& g = grads.at(name);
      auto [mit, fresh_m] = m_.try_emplace(name, p.rows(), p.cols());
      auto [vit, fresh_v] = v_.try_emplace(name, p.rows(), p.cols());
      Tensor& m = mit->second;
      Tensor& v = vit->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
    return out;
  }

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  ParamMap m_;
  ParamMap v_;
};

}  // namespace ssmt
