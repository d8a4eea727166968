#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ssmt/tensor.hpp"

namespace ssmt {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] std::size_t id() const noexcept { return id_; }
  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }
  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] Shape shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// recording order is already a topological order of the graph.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return variable(std::move(value), false); }

  /// Records an op output. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad ? std::move(backward) : BackwardFn{}, requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  [[nodiscard]] const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Adjoint of node `id`. Nodes never reached by backward have an all-zero adjoint.
  [[nodiscard]] Tensor grad(const Var& v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.empty()) return Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  [[nodiscard]] const Tensor& upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Adds `g` into the adjoint of node `id` (no-op for nodes without gradients).
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  void accumulate(std::size_t id, Tensor&& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = std::move(g);
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  /// Seeds d(loss)/d(loss) = 1 and replays adjoints in reverse recording order.
  void backward(const Var& loss) {
    if (loss.value().size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.value().shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    visits_ = 0;
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Tensor::scalar(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      ++visits_;
      n.backward(*this, i);
    }
  }

  /// Number of op nodes whose adjoint rule ran during the last backward().
  [[nodiscard]] std::size_t last_backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace ad {

namespace detail {

inline void same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  Shape out{};
  for (int d = 0; d < 2; ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
  }
  return out;
}

/// Sums `g` down to `target` along broadcast dimensions.
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out(target[0], target[1]);
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const std::size_t tr = target[0] == 1 ? 0 : r;
    for (std::size_t c = 0; c < g.cols(); ++c) out(tr, target[1] == 1 ? 0 : c) += g(r, c);
  }
  return out;
}

template <class F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, const Shape& out_shape, F f) {
  Tensor out(out_shape[0], out_shape[1]);
  const bool ar = a.rows() == 1, ac = a.cols() == 1, br = b.rows() == 1, bc = b.cols() == 1;
  for (std::size_t r = 0; r < out_shape[0]; ++r) {
    for (std::size_t c = 0; c < out_shape[1]; ++c) {
      out(r, c) = f(a(ar ? 0 : r, ac ? 0 : c), b(br ? 0 : r, bc ? 0 : c));
    }
  }
  return out;
}

/// Elementwise op with derivative written in terms of input and output.
template <class F, class D>
Var unary(const Var& a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), a.requires_grad(), [ia, dfdx](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(ia);
    const Tensor& yv = t.value(self);
    Tensor dx(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] = g[i] * dfdx(xv[i], yv[i]);
    t.accumulate(ia, std::move(dx));
  });
}

}  // namespace detail

// ---- matrix products -------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b, "matmul");
  Tensor out = kernel::matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (t.requires_grad(ia)) t.accumulate(ia, kernel::matmul_nt(g, t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, kernel::matmul_tn(t.value(ia), g));
  });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::same_tape(a, b, "matmul_nt");
  Tensor out = kernel::matmul_nt(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (t.requires_grad(ia)) t.accumulate(ia, kernel::matmul(g, t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, kernel::matmul_tn(g, t.value(ia)));
  });
}

inline Var transpose(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value().transposed(), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, t.upstream(self).transposed());
  });
}

// ---- broadcasting elementwise binaries -------------------------------------
// Extents must match or be 1 on each axis (scalar, row, and column broadcast).

inline Var add(const Var& a, const Var& b) {
  detail::same_tape(a, b, "add");
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "add");
  Tensor out = detail::broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x + y; });
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (t.requires_grad(ia)) t.accumulate(ia, detail::reduce_to(g, t.value(ia).shape()));
    if (t.requires_grad(ib)) t.accumulate(ib, detail::reduce_to(g, t.value(ib).shape()));
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_tape(a, b, "sub");
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  Tensor out = detail::broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x - y; });
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (t.requires_grad(ia)) t.accumulate(ia, detail::reduce_to(g, t.value(ia).shape()));
    if (t.requires_grad(ib)) {
      Tensor ng = detail::reduce_to(g, t.value(ib).shape());
      for (auto& v : ng.values()) v = -v;
      t.accumulate(ib, std::move(ng));
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_tape(a, b, "mul");
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  Tensor out = detail::broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x * y; });
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib, s](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor ga = detail::broadcast_apply(g, bv, s, [](double x, double y) { return x * y; });
      t.accumulate(ia, detail::reduce_to(ga, av.shape()));
    }
    if (t.requires_grad(ib)) {
      Tensor gb = detail::broadcast_apply(g, av, s, [](double x, double y) { return x * y; });
      t.accumulate(ib, detail::reduce_to(gb, bv.shape()));
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::same_tape(a, b, "div");
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "div");
  for (double v : b.value().values()) {
    if (v == 0.0) throw DomainError("div: zero divisor");
  }
  Tensor out = detail::broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x / y; });
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib, s](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor ga = detail::broadcast_apply(g, bv, s, [](double x, double y) { return x / y; });
      t.accumulate(ia, detail::reduce_to(ga, av.shape()));
    }
    if (t.requires_grad(ib)) {
      const Tensor& yv = t.value(self);
      // d(a/b)/db = -y/b
      Tensor yb = detail::broadcast_apply(yv, bv, s, [](double y, double b) { return -y / b; });
      Tensor gb(s[0], s[1]);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[i] * yb[i];
      t.accumulate(ib, detail::reduce_to(gb, bv.shape()));
    }
  });
}

// ---- scalar ops ------------------------------------------------------------

inline Var scale(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

/// s - a
inline Var rsub_scalar(double s, const Var& a) {
  return detail::unary(a, [s](double x) { return s - x; }, [](double, double) { return -1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

// ---- elementwise nonlinearities --------------------------------------------

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(const Var& a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw DomainError("sqrt: non-positive input " + std::to_string(v));
  }
  return detail::unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

/// x^(-1/2) for x > 0, 0 otherwise. Used for D^{-1/2} with isolated nodes.
inline Var rsqrt_or_zero(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? 1.0 / std::sqrt(x) : 0.0; },
      [](double x, double y) { return x > 0.0 ? -0.5 * y * y * y : 0.0; });
}

/// |x|, subgradient 0 at the kink.
inline Var abs(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

/// [x]_+ = max(x, 0), subgradient 0 at the kink.
inline Var hinge(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Clamps into [lo, hi]; gradient passes only strictly inside the interval.
inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Var clamp_min(const Var& a, double lo) {
  return detail::unary(
      a, [lo](double x) { return std::max(lo, x); }, [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

/// Forward: indicator(x > 0.5). Backward: identity (straight-through estimator).
inline Var straight_through_threshold(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.5 ? 1.0 : 0.0; }, [](double, double) { return 1.0; });
}

// ---- reductions ------------------------------------------------------------

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(s), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const Tensor& x = t.value(ia);
    t.accumulate(ia, Tensor(x.rows(), x.cols(), t.upstream(self)[0]));
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Per-row sums: R x C -> R x 1.
inline Var sum_rows(const Var& a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, 0) += x(r, c);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(ia);
    Tensor dx(xv.rows(), xv.cols());
    for (std::size_t r = 0; r < xv.rows(); ++r)
      for (std::size_t c = 0; c < xv.cols(); ++c) dx(r, c) = g(r, 0);
    t.accumulate(ia, std::move(dx));
  });
}

/// Per-column sums: R x C -> 1 x C.
inline Var sum_cols(const Var& a) {
  const Tensor& x = a.value();
  Tensor out(1, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(0, c) += x(r, c);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(ia);
    Tensor dx(xv.rows(), xv.cols());
    for (std::size_t r = 0; r < xv.rows(); ++r)
      for (std::size_t c = 0; c < xv.cols(); ++c) dx(r, c) = g(0, c);
    t.accumulate(ia, std::move(dx));
  });
}

inline Var mean_rows(const Var& a) { return scale(sum_rows(a), 1.0 / static_cast<double>(a.value().cols())); }
inline Var mean_cols(const Var& a) { return scale(sum_cols(a), 1.0 / static_cast<double>(a.value().rows())); }

/// Euclidean norm of each row: R x C -> R x 1. Subgradient 0 for a zero row.
inline Var row_l2norm(const Var& a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c) * x(r, c);
    out(r, 0) = std::sqrt(s);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(ia);
    const Tensor& nv = t.value(self);
    Tensor dx(xv.rows(), xv.cols());
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      if (nv(r, 0) == 0.0) continue;
      const double k = g(r, 0) / nv(r, 0);
      for (std::size_t c = 0; c < xv.cols(); ++c) dx(r, c) = k * xv(r, c);
    }
    t.accumulate(ia, std::move(dx));
  });
}

/// Row-wise softmax with max-shift for stability.
inline Var softmax_rows(const Var& a) {
  const Tensor& x = a.value();
  Tensor y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double m = x(r, 0);
    for (std::size_t c = 1; c < x.cols(); ++c) m = std::max(m, x(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) z += (y(r, c) = std::exp(x(r, c) - m));
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) /= z;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& yv = t.value(self);
    Tensor dx(yv.rows(), yv.cols());
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < yv.cols(); ++c) dot += g(r, c) * yv(r, c);
      for (std::size_t c = 0; c < yv.cols(); ++c) dx(r, c) = yv(r, c) * (g(r, c) - dot);
    }
    t.accumulate(ia, std::move(dx));
  });
}

// ---- structural ops --------------------------------------------------------

enum class Axis { rows, cols };

/// Concatenates along rows (stacking vertically) or columns (side by side).
inline Var concat(const std::vector<Var>& parts, Axis axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Tape& tape = parts.front().tape();
  std::size_t rows = 0, cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (axis == Axis::cols) {
      if (rows == 0) rows = s[0];
      if (s[0] != rows) {
        throw ShapeError("concat(cols): " + shape_string(parts.front().shape()) + " vs " + shape_string(s));
      }
      cols += s[1];
    } else {
      if (cols == 0) cols = s[1];
      if (s[1] != cols) {
        throw ShapeError("concat(rows): " + shape_string(parts.front().shape()) + " vs " + shape_string(s));
      }
      rows += s[0];
    }
    rg = rg || p.requires_grad();
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < v.rows(); ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) {
        if (axis == Axis::cols) {
          out(r, off + c) = v(r, c);
        } else {
          out(off + r, c) = v(r, c);
        }
      }
    off += axis == Axis::cols ? v.cols() : v.rows();
    ids.push_back(p.id());
  }
  return tape.record(std::move(out), rg, [ids, axis](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    std::size_t o = 0;
    for (std::size_t id : ids) {
      const Tensor& v = t.value(id);
      if (t.requires_grad(id)) {
        Tensor d(v.rows(), v.cols());
        for (std::size_t r = 0; r < v.rows(); ++r)
          for (std::size_t c = 0; c < v.cols(); ++c) d(r, c) = axis == Axis::cols ? g(r, o + c) : g(o + r, c);
        t.accumulate(id, std::move(d));
      }
      o += axis == Axis::cols ? v.cols() : v.rows();
    }
  });
}

/// Single column j as an R x 1 value.
inline Var column(const Var& a, std::size_t j) {
  const Tensor& x = a.value();
  if (j >= x.cols()) throw ShapeError("column: index " + std::to_string(j) + " out of " + shape_string(x.shape()));
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) out(r, 0) = x(r, j);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia, j](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(ia);
    Tensor dx(xv.rows(), xv.cols());
    for (std::size_t r = 0; r < xv.rows(); ++r) dx(r, j) = g(r, 0);
    t.accumulate(ia, std::move(dx));
  });
}

/// Repeats a 1 x C row over `n` rows.
inline Var broadcast_row(const Var& a, std::size_t n) {
  if (a.value().rows() != 1) throw ShapeError("broadcast_row: expected a row, got " + shape_string(a.shape()));
  const Tensor& x = a.value();
  Tensor out(n, x.cols());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(0, c);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    t.accumulate(ia, detail::reduce_to(t.upstream(self), t.value(ia).shape()));
  });
}

/// Stacks `copies` vertical copies of an R x C block.
inline Var tile_rows(const Var& a, std::size_t copies) {
  const Tensor& x = a.value();
  Tensor out(x.rows() * copies, x.cols());
  for (std::size_t b = 0; b < copies; ++b)
    std::copy(x.values().begin(), x.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(b * x.size()));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia, copies](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(ia);
    Tensor dx(xv.rows(), xv.cols());
    for (std::size_t b = 0; b < copies; ++b)
      for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += g[b * xv.size() + i];
    t.accumulate(ia, std::move(dx));
  });
}

/// Rows of `a` selected by `index` (repeats allowed); scatter-add backward.
inline Var gather_rows(const Var& a, std::vector<std::size_t> index) {
  const Tensor& x = a.value();
  Tensor out(index.size(), x.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= x.rows()) throw ShapeError("gather_rows: row " + std::to_string(index[r]) + " out of " + shape_string(x.shape()));
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(index[r], c);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.requires_grad(), [ia, index = std::move(index)](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(ia);
    Tensor dx(xv.rows(), xv.cols());
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t c = 0; c < xv.cols(); ++c) dx(index[r], c) += g(r, c);
    t.accumulate(ia, std::move(dx));
  });
}

// ---- fused ops for batched graph models ------------------------------------

/// Applies an N x N operator to each of the `blocks` consecutive N-row blocks
/// of `x` ((blocks*N) x C), i.e. (I_blocks ⊗ op) · x.
inline Var block_left_multiply(const Var& op, const Var& x, std::size_t blocks) {
  detail::same_tape(op, x, "block_left_multiply");
  const Tensor& a = op.value();
  const Tensor& xv = x.value();
  const std::size_t n = a.rows();
  if (a.cols() != n || xv.rows() != n * blocks) {
    throw ShapeError("block_left_multiply: operator " + shape_string(a.shape()) + " with input " +
                     shape_string(xv.shape()) + " in " + std::to_string(blocks) + " blocks");
  }
  const std::size_t c = xv.cols();
  Tensor out(xv.rows(), c);
  for (std::size_t b = 0; b < blocks; ++b) {
    const double* xb = xv.data() + b * n * c;
    double* ob = out.data() + b * n * c;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double aij = a(i, j);
        if (aij == 0.0) continue;
        for (std::size_t k = 0; k < c; ++k) ob[i * c + k] += aij * xb[j * c + k];
      }
  }
  const std::size_t io = op.id(), ix = x.id();
  return op.tape().record(std::move(out), op.requires_grad() || x.requires_grad(),
                          [io, ix, blocks, n, c](Tape& t, std::size_t self) {
                            const Tensor& g = t.upstream(self);
                            const Tensor& av = t.value(io);
                            const Tensor& xv2 = t.value(ix);
                            if (t.requires_grad(ix)) {
                              Tensor dx(xv2.rows(), c);
                              for (std::size_t b = 0; b < blocks; ++b) {
                                const double* gb = g.data() + b * n * c;
                                double* db = dx.data() + b * n * c;
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < n; ++j) {
                                    const double aij = av(i, j);
                                    if (aij == 0.0) continue;
                                    for (std::size_t k = 0; k < c; ++k) db[j * c + k] += aij * gb[i * c + k];
                                  }
                              }
                              t.accumulate(ix, std::move(dx));
                            }
                            if (t.requires_grad(io)) {
                              Tensor da(n, n);
                              for (std::size_t b = 0; b < blocks; ++b) {
                                const double* gb = g.data() + b * n * c;
                                const double* xb = xv2.data() + b * n * c;
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < n; ++j) {
                                    double s = 0.0;
                                    for (std::size_t k = 0; k < c; ++k) s += gb[i * c + k] * xb[j * c + k];
                                    da(i, j) += s;
                                  }
                              }
                              t.accumulate(io, std::move(da));
                            }
                          });
}

/// Per-row vector-matrix product: row r of `w` (R x I*J) is read as an I x J
/// matrix W_r and out_r = u_r · W_r, giving R x J.
inline Var rowwise_bilinear(const Var& u, const Var& w, std::size_t out_cols) {
  detail::same_tape(u, w, "rowwise_bilinear");
  const Tensor& uv = u.value();
  const Tensor& wv = w.value();
  const std::size_t in = uv.cols(), j = out_cols;
  if (wv.rows() != uv.rows() || wv.cols() != in * j) {
    throw ShapeError("rowwise_bilinear: input " + shape_string(uv.shape()) + " with weights " +
                     shape_string(wv.shape()) + " for " + std::to_string(j) + " outputs");
  }
  Tensor out(uv.rows(), j);
  for (std::size_t r = 0; r < uv.rows(); ++r) {
    const double* wr = wv.data() + r * in * j;
    double* orow = out.data() + r * j;
    for (std::size_t i = 0; i < in; ++i) {
      const double ui = uv(r, i);
      for (std::size_t k = 0; k < j; ++k) orow[k] += ui * wr[i * j + k];
    }
  }
  const std::size_t iu = u.id(), iw = w.id();
  return u.tape().record(std::move(out), u.requires_grad() || w.requires_grad(), [iu, iw, in, j](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& uv2 = t.value(iu);
    const Tensor& wv2 = t.value(iw);
    if (t.requires_grad(iu)) {
      Tensor du(uv2.rows(), in);
      for (std::size_t r = 0; r < uv2.rows(); ++r) {
        const double* wr = wv2.data() + r * in * j;
        const double* gr = g.data() + r * j;
        for (std::size_t i = 0; i < in; ++i) {
          double s = 0.0;
          for (std::size_t k = 0; k < j; ++k) s += gr[k] * wr[i * j + k];
          du(r, i) = s;
        }
      }
      t.accumulate(iu, std::move(du));
    }
    if (t.requires_grad(iw)) {
      Tensor dw(wv2.rows(), wv2.cols());
      for (std::size_t r = 0; r < uv2.rows(); ++r) {
        double* dr = dw.data() + r * in * j;
        const double* gr = g.data() + r * j;
        for (std::size_t i = 0; i < in; ++i) {
          const double ui = uv2(r, i);
          for (std::size_t k = 0; k < j; ++k) dr[i * j + k] = ui * gr[k];
        }
      }
      t.accumulate(iw, std::move(dw));
    }
  });
}

}  // namespace ad

// Operator sugar for readability inside model code.
inline Var operator+(const Var& a, const Var& b) { return ad::add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return ad::sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return ad::mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return ad::div(a, b); }

}  // namespace ssmt
