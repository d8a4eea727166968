#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ssmt.hpp"

namespace ssmt::testing {

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` over every input coordinate.
inline double max_grad_error(const ScalarFn& f, std::vector<Tensor> inputs, double step = 1e-5,
                             double floor = 1e-6) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    const Var loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval = [&] {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    return f(tape, vars).value().item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + step;
      const double up = eval();
      inputs[k][i] = orig - step;
      const double down = eval();
      inputs[k][i] = orig;
      const double num = (up - down) / (2 * step);
      const double ana = analytic[k][i];
      worst = std::max(worst, std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor}));
    }
  }
  return worst;
}

inline Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  Tensor t(r, c);
  for (auto& v : t.values()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// Weighted sum so that every output entry carries a distinct adjoint.
inline Var weighted_sum(Tape& tape, const Var& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::sum(ad::mul(y, tape.constant(random_tensor(rng, y.shape()[0], y.shape()[1]))));
}

inline TrainConfig tiny_config() {
  TrainConfig c;
  c.input_len = 6;
  c.horizon = 3;
  c.hidden = 4;
  c.memory_items = 4;
  c.embed_dim = 4;
  c.samples_per_hour = 2;
  c.batch_size = 12;
  c.max_epochs = 2;
  c.finetune_epochs = 2;
  c.finetune_days = 3;
  c.stride = 2;
  c.horizons = {1, 3};
  c.seed = 5;
  return c;
}

}  // namespace ssmt::testing
