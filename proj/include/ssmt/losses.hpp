#pragma once

#include <cmath>
#include <vector>

#include "ssmt/graph_memory.hpp"

namespace ssmt {

/// Weights of the fine-tuning objective and the triplet margin.
struct LossWeights {
  double c1 = 0.5;
  double c2 = 0.2;
  double c3 = 0.3;
  double margin = 1.0;  // lambda
};

namespace detail {
inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}
}  // namespace detail

/// Mean absolute error over every predicted entry.
inline Var mae(const Var& pred, const Var& target) {
  detail::same_shape(pred.value(), target.value(), "mae");
  return ad::mean(ad::abs(ad::sub(pred, target)));
}

inline double mae(const Tensor& pred, const Tensor& target) {
  detail::same_shape(pred, target, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(target[i] - pred[i]);
  return s / static_cast<double>(pred.size());
}

inline double rmse(const Tensor& pred, const Tensor& target) {
  detail::same_shape(pred, target, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (target[i] - pred[i]) * (target[i] - pred[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

namespace detail {
inline void check_top2(const Var& anchors, const Var& memory, const std::vector<TopTwo>& top2) {
  if (memory.shape()[0] < 2) throw ShapeError("memory losses need at least 2 memory items");
  if (top2.size() != anchors.shape()[0]) {
    throw ShapeError("memory losses: " + std::to_string(top2.size()) + " top-2 entries for " +
                     std::to_string(anchors.shape()[0]) + " anchors");
  }
}
inline std::vector<std::size_t> pick(const std::vector<TopTwo>& top2, std::size_t which) {
  std::vector<std::size_t> out(top2.size());
  for (std::size_t i = 0; i < top2.size(); ++i) out[i] = top2[i][which];
  return out;
}
}  // namespace detail

/// Triplet hinge: sum over anchors of [|O - M_p| - |O - M_n| + margin]_+,
/// divided by the number of samples in the batch.
inline Var separate_loss(const Var& anchors, const Var& memory, const std::vector<TopTwo>& top2, double margin,
                         std::size_t samples = 1) {
  detail::check_top2(anchors, memory, top2);
  const Var dp = ad::row_l2norm(ad::sub(anchors, ad::gather_rows(memory, detail::pick(top2, 0))));
  const Var dn = ad::row_l2norm(ad::sub(anchors, ad::gather_rows(memory, detail::pick(top2, 1))));
  return ad::scale(ad::sum(ad::hinge(ad::add_scalar(ad::sub(dp, dn), margin))), 1.0 / static_cast<double>(samples));
}

/// Sum over anchors of |O - M_p|, divided by the number of samples.
inline Var compact_loss(const Var& anchors, const Var& memory, const std::vector<TopTwo>& top2,
                        std::size_t samples = 1) {
  detail::check_top2(anchors, memory, top2);
  const Var dp = ad::row_l2norm(ad::sub(anchors, ad::gather_rows(memory, detail::pick(top2, 0))));
  return ad::scale(ad::sum(dp), 1.0 / static_cast<double>(samples));
}

inline double separate_loss(const Tensor& anchors, const Tensor& memory, const std::vector<TopTwo>& top2,
                            double margin, std::size_t samples = 1) {
  Tape tape;
  return separate_loss(tape.constant(anchors), tape.constant(memory), top2, margin, samples).value().item();
}

inline double compact_loss(const Tensor& anchors, const Tensor& memory, const std::vector<TopTwo>& top2,
                           std::size_t samples = 1) {
  Tape tape;
  return compact_loss(tape.constant(anchors), tape.constant(memory), top2, samples).value().item();
}

inline double total_loss(double mae_value, double separate, double compact, const LossWeights& w) {
  return w.c1 * mae_value + w.c2 * separate + w.c3 * compact;
}

inline Var total_loss(const Var& mae_value, const Var& separate, const Var& compact, const LossWeights& w) {
  return ad::add(ad::add(ad::scale(mae_value, w.c1), ad::scale(separate, w.c2)), ad::scale(compact, w.c3));
}

}  // namespace ssmt
