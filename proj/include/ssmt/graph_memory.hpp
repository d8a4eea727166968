#pragma once

#include <array>
#include <string>
#include <vector>

#include "ssmt/autodiff.hpp"

namespace ssmt {

inline constexpr double kSimilarityEpsilon = 1e-6;  // xi stays in [eps, 1 - eps]
inline constexpr double kNormEpsilon = 1e-8;        // cosine denominators

enum class SampleMode { soft, hard };

inline SampleMode sample_mode_from(const std::string& s) {
  if (s == "soft") return SampleMode::soft;
  if (s == "hard") return SampleMode::hard;
  throw ConfigError("unknown sample mode '" + s + "'");
}

/// Rows scaled to unit length; rows shorter than `eps` are divided by `eps`.
inline Var normalize_rows(const Var& x, double eps) {
  return ad::div(x, ad::clamp_min(ad::row_l2norm(x), eps));
}

/// Cosine Gram matrix of `q`'s rows mapped affinely from [-1, 1] into
/// [eps, 1 - eps]. Symmetric by construction.
inline Var squashed_cosine_gram(const Var& q) {
  const Var unit = normalize_rows(q, 1e-12);
  const Var gram = ad::matmul_nt(unit, unit);
  return ad::clamp(ad::add_scalar(ad::scale(gram, 0.5), 0.5), kSimilarityEpsilon, 1.0 - kSimilarityEpsilon);
}

/// Pairwise node similarity through the memory: Q = E M^T, xi = squash(Q^ Q^^T).
inline Var node_similarity(const Var& embedding, const Var& memory) {
  if (embedding.shape()[1] != memory.shape()[1]) {
    throw ShapeError("node_similarity: embedding " + shape_string(embedding.shape()) + " vs memory " +
                     shape_string(memory.shape()));
  }
  return squashed_cosine_gram(ad::matmul_nt(embedding, memory));
}

/// g1 - g2 for i.i.d. standard Gumbel draws, one per adjacency entry.
inline Tensor draw_gumbel_difference(std::size_t n, Rng& rng) {
  Tensor noise(n, n);
  for (auto& v : noise.values()) {
    const double g1 = rng.gumbel();
    const double g2 = rng.gumbel();
    v = g1 - g2;
  }
  return noise;
}

/// A = sigmoid((logit(xi) + noise) / tau). Hard mode thresholds at 0.5 in the
/// forward pass and passes the soft gradient through.
inline Var gumbel_adjacency(const Var& xi, const Tensor& noise, double tau, SampleMode mode) {
  if (!(tau > 0.0)) throw DomainError("gumbel_adjacency: temperature must be positive, got " + std::to_string(tau));
  if (noise.shape() != xi.shape()) {
    throw ShapeError("gumbel_adjacency: noise " + shape_string(noise.shape()) + " vs xi " + shape_string(xi.shape()));
  }
  Tape& tape = xi.tape();
  const Var logit = ad::sub(ad::log(xi), ad::log(ad::rsub_scalar(1.0, xi)));
  const Var soft = ad::sigmoid(ad::scale(ad::add(logit, tape.constant(noise)), 1.0 / tau));
  return mode == SampleMode::hard ? ad::straight_through_threshold(soft) : soft;
}

/// I + D^{-1/2} A D^{-1/2} with D_ii = sum_j A_ij; isolated nodes get D^{-1/2}_ii = 0.
inline Var gcn_propagator(const Var& adjacency) {
  const Shape s = adjacency.shape();
  if (s[0] != s[1]) throw ShapeError("gcn_propagator: adjacency must be square, got " + shape_string(s));
  Tape& tape = adjacency.tape();
  const Var dinv = ad::rsqrt_or_zero(ad::sum_rows(adjacency));
  const Var scaled = ad::mul(ad::mul(adjacency, dinv), ad::transpose(dinv));
  return ad::add(scaled, tape.constant(Tensor::identity(s[0])));
}

/// O = Â X W for a batch of `blocks` inputs stacked vertically in X.
inline Var gcn_apply(const Var& propagator, const Var& x, const Var& weight, std::size_t blocks = 1) {
  if (x.shape()[1] != weight.shape()[0]) {
    throw ShapeError("gcn_forward: input " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
  }
  return ad::matmul(ad::block_left_multiply(propagator, x, blocks), weight);
}

inline Var gcn_forward(const Var& adjacency, const Var& x, const Var& weight, std::size_t blocks = 1) {
  return gcn_apply(gcn_propagator(adjacency), x, weight, blocks);
}

using TopTwo = std::array<std::size_t, 2>;  // (positive, negative) memory item

struct MemoryRead {
  Var weights;    // rows x b, softmax of cosine similarities
  Var recovered;  // rows x d, convex combination of memory items
  std::vector<TopTwo> top2;
};

/// Indices of the largest and second-largest entry of each row; ties go to
/// the lower index.
inline std::vector<TopTwo> top_two(const Tensor& w) {
  if (w.cols() < 2) throw ShapeError("top_two: need at least 2 memory items, got " + std::to_string(w.cols()));
  std::vector<TopTwo> out(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    std::size_t best = 0, second = 1;
    if (w(r, 1) > w(r, 0)) std::swap(best, second);
    for (std::size_t j = 2; j < w.cols(); ++j) {
      if (w(r, j) > w(r, best)) {
        second = best;
        best = j;
      } else if (w(r, j) > w(r, second)) {
        second = j;
      }
    }
    out[r] = {best, second};
  }
  return out;
}

/// Softmax-over-cosine addressing of the memory by each row of `queries`.
inline MemoryRead memory_address(const Var& queries, const Var& memory) {
  if (queries.shape()[1] != memory.shape()[1]) {
    throw ShapeError("memory_address: queries " + shape_string(queries.shape()) + " vs memory " +
                     shape_string(memory.shape()));
  }
  if (memory.shape()[0] < 2) throw ShapeError("memory_address: need at least 2 memory items");
  const Var sim = ad::matmul_nt(normalize_rows(queries, kNormEpsilon), normalize_rows(memory, kNormEpsilon));
  const Var w = ad::softmax_rows(sim);
  const Var p = ad::matmul(w, memory);
  return {w, p, top_two(w.value())};
}

// Value-level conveniences.

inline Tensor node_similarity(const Tensor& embedding, const Tensor& memory) {
  Tape tape;
  return node_similarity(tape.constant(embedding), tape.constant(memory)).value();
}

inline Tensor gumbel_adjacency(const Tensor& xi, const Tensor& noise, double tau, SampleMode mode) {
  Tape tape;
  return gumbel_adjacency(tape.constant(xi), noise, tau, mode).value();
}

inline Tensor gcn_forward(const Tensor& adjacency, const Tensor& x, const Tensor& weight) {
  Tape tape;
  return gcn_forward(tape.constant(adjacency), tape.constant(x), tape.constant(weight)).value();
}

struct MemoryReadValues {
  Tensor weights;
  Tensor recovered;
  std::vector<TopTwo> top2;
};

inline MemoryReadValues memory_address(const Tensor& queries, const Tensor& memory) {
  Tape tape;
  auto r = memory_address(tape.constant(queries), tape.constant(memory));
  return {r.weights.value(), r.recovered.value(), r.top2};
}

}  // namespace ssmt
