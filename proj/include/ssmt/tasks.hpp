#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "ssmt/autodiff.hpp"
#include "ssmt/data.hpp"

namespace ssmt {

/// One periodicity task: V = 1 (daily), 7 (weekly) or 30 (monthly).
struct PeriodSpec {
  int period_days = 1;
  int samples_per_hour = 12;
};

inline std::vector<PeriodSpec> period_specs(std::span<const int> periods, int samples_per_hour) {
  std::vector<PeriodSpec> out;
  for (int v : periods) {
    if (v <= 0) throw ConfigError("task period must be positive, got " + std::to_string(v));
    out.push_back({v, samples_per_hour});
  }
  return out;
}

/// Positional encoding of one absolute sample index: sin of the phase angle at
/// even positions, cos at odd ones.
inline double periodic_encoding_at(std::int64_t pos, const PeriodSpec& spec) {
  const double cycle = 24.0 * spec.samples_per_hour * spec.period_days;
  // Reduce to one cycle first so large absolute indices keep full precision.
  const auto cycle_len = static_cast<std::int64_t>(std::llround(cycle));
  std::int64_t phase = pos % cycle_len;
  if (phase < 0) phase += cycle_len;
  const double theta = 2.0 * std::numbers::pi * static_cast<double>(phase) / cycle;
  return (pos % 2 == 0) ? std::sin(theta) : std::cos(theta);
}

inline std::vector<double> periodic_encoding(std::int64_t t_start, std::size_t length, const PeriodSpec& spec) {
  std::vector<double> pe(length);
  for (std::size_t j = 0; j < length; ++j) pe[j] = periodic_encoding_at(t_start + static_cast<std::int64_t>(j), spec);
  return pe;
}

/// x + PE, the encoding broadcast over all nodes.
inline Tensor add_periodic_encoding(const Tensor& x, std::int64_t t_start, const PeriodSpec& spec) {
  const auto pe = periodic_encoding(t_start, x.cols(), spec);
  Tensor out = x;
  for (std::size_t n = 0; n < x.rows(); ++n)
    for (std::size_t t = 0; t < x.cols(); ++t) out(n, t) += pe[t];
  return out;
}

/// Learnable meta-positional encoding: eta[n,t] = pe_scale[t] * pe_basis[n,t].
struct MetaPE {
  Tensor pe_scale;  // 1 x T
  Tensor pe_basis;  // N x T
};

inline Tensor eta(const MetaPE& m) {
  if (m.pe_scale.rows() != 1 || m.pe_scale.cols() != m.pe_basis.cols()) {
    throw ShapeError("eta: pe_scale " + shape_string(m.pe_scale.shape()) + " vs pe_basis " +
                     shape_string(m.pe_basis.shape()));
  }
  Tensor out = m.pe_basis;
  for (std::size_t n = 0; n < out.rows(); ++n)
    for (std::size_t t = 0; t < out.cols(); ++t) out(n, t) *= m.pe_scale(0, t);
  return out;
}

/// Same product on a tape, so the outer loop can differentiate through it.
inline Var eta(const Var& pe_scale, const Var& pe_basis) { return ad::mul(pe_basis, pe_scale); }

/// Contiguous equal parts of an ordered batch.
template <class T>
std::vector<std::vector<T>> partition_batch(const std::vector<T>& batch, std::size_t parts = 3) {
  if (parts == 0 || batch.size() % parts != 0) {
    throw ConfigError("cannot split a batch of " + std::to_string(batch.size()) + " into " + std::to_string(parts) +
                      " equal parts");
  }
  const std::size_t each = batch.size() / parts;
  std::vector<std::vector<T>> out(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    out[p].assign(batch.begin() + static_cast<std::ptrdiff_t>(p * each),
                  batch.begin() + static_cast<std::ptrdiff_t>((p + 1) * each));
  }
  return out;
}

/// A periodicity task. Inputs carry the task PE; query inputs additionally
/// receive eta when `query_uses_meta_pe`, which is added on the tape at
/// evaluation time so its gradient reaches the meta-PE parameters.
struct Task {
  PeriodSpec period;
  std::vector<WindowSample> support;
  std::vector<WindowSample> query;
  bool query_uses_meta_pe = true;
};

struct TaskOptions {
  bool enable_pe = true;
  bool enable_mpe = true;
};

/// Splits `batch` into one task per spec, each halved into support and query.
inline std::vector<Task> build_tasks(const std::vector<WindowSample>& batch, std::span<const PeriodSpec> specs,
                                     const MetaPE& meta_pe, const TaskOptions& options = {}) {
  if (specs.empty()) throw ConfigError("build_tasks: need at least one period");
  if (!batch.empty() && meta_pe.pe_basis.rows() != batch.front().x.rows()) {
    throw ShapeError("build_tasks: meta-PE basis has " + std::to_string(meta_pe.pe_basis.rows()) +
                     " nodes, batch has " + std::to_string(batch.front().x.rows()));
  }
  if (batch.size() % (2 * specs.size()) != 0) {
    throw ConfigError("batch of " + std::to_string(batch.size()) + " cannot form " + std::to_string(specs.size()) +
                      " tasks with equal support/query halves");
  }
  const auto parts = partition_batch(batch, specs.size());
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Task task{specs[i], {}, {}, options.enable_mpe};
    const std::size_t half = parts[i].size() / 2;
    for (std::size_t k = 0; k < parts[i].size(); ++k) {
      WindowSample s = parts[i][k];
      if (options.enable_pe) s.x = add_periodic_encoding(s.x, s.t_start, specs[i]);
      (k < half ? task.support : task.query).push_back(std::move(s));
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

/// Value of a query input as the model sees it (x + PE + eta).
inline Tensor materialize_query_input(const WindowSample& query, const MetaPE& meta_pe) {
  Tensor out = query.x;
  const Tensor e = eta(meta_pe);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += e[i];
  return out;
}

}  // namespace ssmt
