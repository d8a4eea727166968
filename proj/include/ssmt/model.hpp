#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ssmt/graph_memory.hpp"
#include "ssmt/optim.hpp"
#include "ssmt/tasks.hpp"

namespace ssmt {

/// Parameter tensor names.
namespace param {
inline constexpr const char* node_embedding = "node_embedding";
inline constexpr const char* memory = "memory";
inline constexpr const char* pe_scale = "pe_scale";
inline constexpr const char* pe_basis = "pe_basis";
inline constexpr const char* gcn_weight = "gcn_weight";
inline constexpr const char* gate_z_pool = "gate_z_pool";
inline constexpr const char* gate_r_pool = "gate_r_pool";
inline constexpr const char* gate_c_pool = "gate_c_pool";
inline constexpr const char* gate_z_bias = "gate_z_bias";
inline constexpr const char* gate_r_bias = "gate_r_bias";
inline constexpr const char* gate_c_bias = "gate_c_bias";
inline constexpr const char* readout_pool = "readout_pool";
inline constexpr const char* readout_bias = "readout_bias";
}  // namespace param

enum class TransferClass { shared, city_private };

inline std::string_view to_string(TransferClass c) { return c == TransferClass::shared ? "shared" : "city-private"; }

/// Node embeddings and the meta-PE basis are sized by the city's node count and
/// never cross cities; everything else is node-agnostic.
inline TransferClass transfer_class(std::string_view name) {
  return (name == param::node_embedding || name == param::pe_basis) ? TransferClass::city_private
                                                                    : TransferClass::shared;
}

inline bool is_meta_pe(std::string_view name) { return name == param::pe_scale || name == param::pe_basis; }

struct ModelDims {
  std::size_t nodes = 0;         // N
  std::size_t input_len = 12;    // T
  std::size_t horizon = 12;      // T'
  std::size_t hidden = 32;       // H
  std::size_t memory_items = 20; // b
  std::size_t embed_dim = 64;    // d

  [[nodiscard]] std::size_t gate_in() const { return 1 + hidden; }
};

struct ModelParams {
  ModelDims dims;
  ParamMap tensors;

  [[nodiscard]] const Tensor& at(const std::string& name) const { return tensors.at(name); }
  Tensor& at(const std::string& name) { return tensors.at(name); }
  [[nodiscard]] MetaPE meta_pe() const { return {at(param::pe_scale), at(param::pe_basis)}; }
};

/// Expected shape of every parameter tensor.
inline std::map<std::string, Shape> param_shapes(const ModelDims& d) {
  const std::size_t gate_cols = d.gate_in() * d.hidden;
  return {
      {param::node_embedding, {d.nodes, d.embed_dim}},
      {param::memory, {d.memory_items, d.embed_dim}},
      {param::pe_scale, {1, d.input_len}},
      {param::pe_basis, {d.nodes, d.input_len}},
      {param::gcn_weight, {d.input_len, d.embed_dim}},
      {param::gate_z_pool, {d.embed_dim, gate_cols}},
      {param::gate_r_pool, {d.embed_dim, gate_cols}},
      {param::gate_c_pool, {d.embed_dim, gate_cols}},
      {param::gate_z_bias, {d.embed_dim, d.hidden}},
      {param::gate_r_bias, {d.embed_dim, d.hidden}},
      {param::gate_c_bias, {d.embed_dim, d.hidden}},
      {param::readout_pool, {d.embed_dim, d.hidden * d.horizon}},
      {param::readout_bias, {d.embed_dim, d.horizon}},
  };
}

inline void validate_dims(const ModelDims& d) {
  if (d.nodes < 2 || d.input_len == 0 || d.horizon == 0 || d.hidden == 0 || d.embed_dim == 0) {
    throw ConfigError("model dimensions must be positive (and at least 2 nodes)");
  }
  if (d.memory_items < 2) throw ConfigError("memory needs at least 2 items, got " + std::to_string(d.memory_items));
}

/// Fresh tensors for one city-private parameter.
inline Tensor init_private_tensor(const std::string& name, const ModelDims& d, Rng& rng) {
  if (name == param::node_embedding) return rng.normal_tensor(d.nodes, d.embed_dim, 1.0 / std::sqrt(double(d.embed_dim)));
  if (name == param::pe_basis) return rng.normal_tensor(d.nodes, d.input_len, 0.01);
  throw std::invalid_argument("not a city-private parameter: " + name);
}

/// Random initialization: N(0, 1/sqrt(fan_in)) with fan_in the leading extent
/// (embedding width for E), memory rows N(0, 1/sqrt(d)), pe_scale = 1.
inline ModelParams init_params(const ModelDims& d, Rng& rng) {
  validate_dims(d);
  ModelParams p{d, {}};
  std::uint64_t stream = 0;
  for (const auto& [name, shape] : param_shapes(d)) {
    Rng r = rng.split(++stream);
    Tensor t;
    if (name == param::pe_scale) {
      t = Tensor(1, d.input_len, 1.0);
    } else if (name == param::memory) {
      t = r.normal_tensor(shape[0], shape[1], 1.0 / std::sqrt(double(d.embed_dim)));
    } else if (transfer_class(name) == TransferClass::city_private) {
      t = init_private_tensor(name, d, r);
    } else {
      t = r.normal_tensor(shape[0], shape[1], 1.0 / std::sqrt(double(shape[0])));
    }
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

/// Model switches that are not parameters.
struct ForwardOptions {
  double tau = 0.5;
  SampleMode mode = SampleMode::soft;
  bool use_memory = true;
};

/// Node-adaptive gate weights generated once per forward pass from P.
struct GateWeights {
  Var z_weight, r_weight, c_weight;  // rows x (1+H)H
  Var z_bias, r_bias, c_bias;        // rows x H
};

inline GateWeights generate_gate_weights(const Var& recovered, const BoundParams& p) {
  return {ad::matmul(recovered, p.at(param::gate_z_pool)), ad::matmul(recovered, p.at(param::gate_r_pool)),
          ad::matmul(recovered, p.at(param::gate_c_pool)), ad::matmul(recovered, p.at(param::gate_z_bias)),
          ad::matmul(recovered, p.at(param::gate_r_bias)), ad::matmul(recovered, p.at(param::gate_c_bias))};
}

/// One recurrent step over a batch of `blocks` graphs stacked row-wise.
///   u = Â [x_t | h],  z = σ(u W_z + b_z),  r = σ(u W_r + b_r)
///   c = tanh(Â [x_t | r ⊙ h] W_c + b_c),  h' = z ⊙ h + (1 - z) ⊙ c
inline Var strgc_cell(const Var& x_t, const Var& h_prev, const Var& propagator, const GateWeights& g,
                      std::size_t blocks) {
  const std::size_t hidden = h_prev.shape()[1];
  const Var u = ad::block_left_multiply(propagator, ad::concat({x_t, h_prev}, ad::Axis::cols), blocks);
  const Var z = ad::sigmoid(ad::add(ad::rowwise_bilinear(u, g.z_weight, hidden), g.z_bias));
  const Var r = ad::sigmoid(ad::add(ad::rowwise_bilinear(u, g.r_weight, hidden), g.r_bias));
  const Var uc =
      ad::block_left_multiply(propagator, ad::concat({x_t, ad::mul(r, h_prev)}, ad::Axis::cols), blocks);
  const Var c = ad::tanh(ad::add(ad::rowwise_bilinear(uc, g.c_weight, hidden), g.c_bias));
  return ad::add(ad::mul(z, h_prev), ad::mul(ad::rsub_scalar(1.0, z), c));
}

/// Tape handles produced by one forward pass.
struct ForwardVars {
  Var similarity;   // N x N
  Var adjacency;    // N x N
  Var propagator;   // N x N
  Var gcn_out;      // (B*N) x d
  std::optional<Var> address_weights;  // (B*N) x b, absent without memory
  Var recovered;    // (B*N) x d
  std::vector<TopTwo> top2;
  std::vector<Var> hidden;  // h_0 .. h_T
  Var prediction;   // (B*N) x T'
};

/// Full forecaster on a tape. `x` stacks `blocks` encoded N x T inputs.
inline ForwardVars forward_on_tape(Tape& tape, const BoundParams& p, const Var& x, std::size_t blocks,
                                   const Tensor& gumbel_noise, const ForwardOptions& opt) {
  const Var& emb = p.at(param::node_embedding);
  const Var& mem = p.at(param::memory);
  const std::size_t n = emb.shape()[0];
  const std::size_t t_len = p.at(param::gcn_weight).shape()[0];
  const std::size_t hidden = p.at(param::gate_z_bias).shape()[1];
  const std::size_t horizon = p.at(param::readout_bias).shape()[1];
  if (x.shape()[0] != n * blocks || x.shape()[1] != t_len) {
    throw ShapeError("forward: input " + shape_string(x.shape()) + " does not match " + std::to_string(blocks) +
                     " blocks of " + std::to_string(n) + "x" + std::to_string(t_len));
  }

  ForwardVars out;
  out.similarity = opt.use_memory ? node_similarity(emb, mem) : squashed_cosine_gram(emb);
  out.adjacency = gumbel_adjacency(out.similarity, gumbel_noise, opt.tau, opt.mode);
  out.propagator = gcn_propagator(out.adjacency);
  out.gcn_out = gcn_apply(out.propagator, x, p.at(param::gcn_weight), blocks);
  if (opt.use_memory) {
    MemoryRead read = memory_address(out.gcn_out, mem);
    out.address_weights = read.weights;
    out.recovered = read.recovered;
    out.top2 = std::move(read.top2);
  } else {
    out.recovered = ad::tile_rows(emb, blocks);
  }

  const GateWeights gates = generate_gate_weights(out.recovered, p);
  out.hidden.push_back(tape.constant(Tensor(n * blocks, hidden)));
  for (std::size_t t = 0; t < t_len; ++t) {
    out.hidden.push_back(strgc_cell(ad::column(x, t), out.hidden.back(), out.propagator, gates, blocks));
  }
  const Var readout_w = ad::matmul(out.recovered, p.at(param::readout_pool));
  const Var readout_b = ad::matmul(out.recovered, p.at(param::readout_bias));
  out.prediction = ad::add(ad::rowwise_bilinear(out.hidden.back(), readout_w, horizon), readout_b);
  return out;
}

/// Stacks N x C blocks vertically.
inline Tensor stack_rows(const std::vector<const Tensor*>& blocks) {
  if (blocks.empty()) throw ShapeError("stack_rows: no blocks");
  const std::size_t r = blocks.front()->rows(), c = blocks.front()->cols();
  Tensor out(r * blocks.size(), c);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b]->shape() != blocks.front()->shape()) throw ShapeError("stack_rows: ragged blocks");
    std::copy(blocks[b]->values().begin(), blocks[b]->values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(b * r * c));
  }
  return out;
}

/// Value snapshot of a single forward pass.
struct ForwardTrace {
  Tensor similarity, adjacency, gcn_out, address_weights, recovered;
  std::vector<TopTwo> top2;
  std::vector<Tensor> hidden;
  Tensor prediction;
};

/// Forward pass for one encoded N x T input.
inline ForwardTrace forward(const Tensor& x, const ModelParams& params, const Tensor& gumbel_noise,
                            const ForwardOptions& opt = {}) {
  Tape tape;
  const BoundParams p = bind_params(tape, params.tensors, false);
  const ForwardVars v = forward_on_tape(tape, p, tape.constant(x), 1, gumbel_noise, opt);
  ForwardTrace tr{v.similarity.value(), v.adjacency.value(), v.gcn_out.value(),
                  v.address_weights ? v.address_weights->value() : Tensor(),
                  v.recovered.value(), v.top2, {}, v.prediction.value()};
  for (const auto& h : v.hidden) tr.hidden.push_back(h.value());
  return tr;
}

inline ForwardTrace forward(const Tensor& x, const ModelParams& params, Rng& noise_rng, const ForwardOptions& opt = {}) {
  return forward(x, params, draw_gumbel_difference(params.dims.nodes, noise_rng), opt);
}

}  // namespace ssmt
