#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace ssmt;
using ssmt::testing::random_tensor;

namespace {

ModelDims small_dims(std::size_t n = 4) { return {n, 6, 2, 3, 4, 5}; }

ModelParams small_params(std::uint64_t seed, std::size_t n = 4) {
  Rng rng(seed);
  return init_params(small_dims(n), rng);
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct CellInputs {
  Tensor x, h, prop;
  Tensor wz, wr, wc, bz, br, bc;
};

Tensor run_cell(const CellInputs& in) {
  Tape tape;
  auto c = [&](const Tensor& t) { return tape.constant(t); };
  const GateWeights g{c(in.wz), c(in.wr), c(in.wc), c(in.bz), c(in.br), c(in.bc)};
  return strgc_cell(c(in.x), c(in.h), c(in.prop), g, 1).value();
}

}  // namespace

TEST(Cell, HandEvaluationTwoNodes) {
  // A = [[0,1],[1,0]] gives the all-ones propagator
  const CellInputs in{Tensor{{1}, {2}},
                      Tensor{{0.5}, {-0.5}},
                      Tensor{{1, 1}, {1, 1}},
                      Tensor{{0.1, 0.2}, {0.3, -0.1}},
                      Tensor{{0.2, 0.1}, {-0.1, 0.4}},
                      Tensor{{0.5, 1.0}, {-0.2, 0.7}},
                      Tensor{{0.05}, {-0.05}},
                      Tensor{{0.0}, {0.0}},
                      Tensor{{0.1}, {0.0}}};
  const Tensor h = run_cell(in);

  // u = [x | h] summed over both nodes = [3, 0] for each row
  const double z0 = sig(3 * 0.1 + 0 * 0.2 + 0.05), z1 = sig(3 * 0.3 + 0 * -0.1 - 0.05);
  const double r0 = sig(3 * 0.2), r1 = sig(3 * -0.1);
  const double rh = 0.5 * r0 + -0.5 * r1;  // propagated r*h
  const double c0 = std::tanh(3 * 0.5 + rh * 1.0 + 0.1);
  const double c1 = std::tanh(3 * -0.2 + rh * 0.7 + 0.0);
  EXPECT_NEAR(h(0, 0), z0 * 0.5 + (1 - z0) * c0, 1e-12);
  EXPECT_NEAR(h(1, 0), z1 * -0.5 + (1 - z1) * c1, 1e-12);
}

TEST(Cell, UpdateGateBoundaries) {
  Rng rng(1);
  const std::size_t n = 3, hd = 2, in = 1 + hd;
  CellInputs c{random_tensor(rng, n, 1), random_tensor(rng, n, hd),  Tensor::identity(n),
               Tensor(n, in * hd),       random_tensor(rng, n, in * hd), random_tensor(rng, n, in * hd),
               Tensor(n, hd, 50.0),      random_tensor(rng, n, hd),  random_tensor(rng, n, hd)};
  EXPECT_LT(max_abs_diff(run_cell(c), c.h), 1e-6);  // z -> 1 keeps the state

  c.bz = Tensor(n, hd, -800.0);  // z underflows to exactly 0
  const Tensor h = run_cell(c);
  // with z = 0 the new state is the candidate alone
  Tape tape;
  const Var rh = ad::mul(ad::sigmoid(ad::add(ad::rowwise_bilinear(
                                                 ad::concat({tape.constant(c.x), tape.constant(c.h)}, ad::Axis::cols),
                                                 tape.constant(c.wr), hd),
                                             tape.constant(c.br))),
                         tape.constant(c.h));
  const Tensor cand =
      ad::tanh(ad::add(ad::rowwise_bilinear(ad::concat({tape.constant(c.x), rh}, ad::Axis::cols), tape.constant(c.wc), hd),
                       tape.constant(c.bc)))
          .value();
  EXPECT_LT(max_abs_diff(h, cand), 1e-15);
}

TEST(Model, ParameterShapesAndTransferClasses) {
  const ModelParams p = small_params(1);
  const auto shapes = param_shapes(p.dims);
  ASSERT_EQ(p.tensors.size(), 13u);
  for (const auto& [name, t] : p.tensors) EXPECT_EQ(t.shape(), shapes.at(name)) << name;
  EXPECT_EQ(p.at(param::gate_z_pool).shape(), (Shape{5, 12}));
  EXPECT_EQ(p.at(param::readout_pool).shape(), (Shape{5, 6}));
  for (const char* name : {param::node_embedding, param::pe_basis})
    EXPECT_EQ(transfer_class(name), TransferClass::city_private);
  for (const char* name : {param::memory, param::pe_scale, param::gcn_weight, param::gate_z_pool, param::gate_r_pool,
                           param::gate_c_pool, param::gate_z_bias, param::gate_r_bias, param::gate_c_bias,
                           param::readout_pool, param::readout_bias})
    EXPECT_EQ(transfer_class(name), TransferClass::shared);
}

TEST(Model, InitDeterminismAndSpread) {
  EXPECT_EQ(small_params(3).tensors, small_params(3).tensors);
  EXPECT_NE(small_params(3).tensors, small_params(4).tensors);
  EXPECT_EQ(small_params(3).at(param::pe_scale), Tensor(1, 6, 1.0));

  Rng rng(5);
  const ModelParams p = init_params(ModelDims{4, 12, 12, 32, 20, 64}, rng);
  const Tensor& pool = p.at(param::gate_c_pool);
  ASSERT_GE(pool.size(), 10000u);
  double sq = 0;
  for (double v : pool.values()) sq += v * v;
  const double sd = std::sqrt(sq / static_cast<double>(pool.size()));
  EXPECT_NEAR(sd, 1.0 / std::sqrt(64.0), 0.1 / std::sqrt(64.0));
}

TEST(Model, ZeroPoolsPredictZero) {
  ModelParams p = small_params(2);
  for (const char* name : {param::gate_z_pool, param::gate_r_pool, param::gate_c_pool, param::gate_z_bias,
                           param::gate_r_bias, param::gate_c_bias, param::readout_pool, param::readout_bias})
    p.at(name).fill(0.0);
  Rng rng(1);
  const auto tr = forward(random_tensor(rng, 4, 6), p, rng);
  EXPECT_EQ(tr.prediction, Tensor(4, 2));
}

TEST(Model, TraceShapes) {
  const ModelParams p = small_params(3);
  Rng rng(2);
  const auto tr = forward(random_tensor(rng, 4, 6), p, rng);
  EXPECT_EQ(tr.similarity.shape(), (Shape{4, 4}));
  EXPECT_EQ(tr.adjacency.shape(), (Shape{4, 4}));
  EXPECT_EQ(tr.gcn_out.shape(), (Shape{4, 5}));
  EXPECT_EQ(tr.address_weights.shape(), (Shape{4, 4}));
  EXPECT_EQ(tr.recovered.shape(), (Shape{4, 5}));
  EXPECT_EQ(tr.top2.size(), 4u);
  ASSERT_EQ(tr.hidden.size(), 7u);
  for (const auto& h : tr.hidden) EXPECT_EQ(h.shape(), (Shape{4, 3}));
  EXPECT_EQ(tr.prediction.shape(), (Shape{4, 2}));
  EXPECT_THROW(forward(random_tensor(rng, 4, 5), p, rng), ShapeError);
}

TEST(Model, Deterministic) {
  const ModelParams p = small_params(4);
  Rng a(9), b(9);
  Rng data(1);
  const Tensor x = random_tensor(data, 4, 6);
  const auto t1 = forward(x, p, a), t2 = forward(x, p, b);
  EXPECT_EQ(t1.prediction, t2.prediction);
  EXPECT_EQ(t1.adjacency, t2.adjacency);
  EXPECT_EQ(t1.hidden, t2.hidden);
}

TEST(Model, MaeGradientMatchesFiniteDifferences) {
  ModelParams p = small_params(6);
  Rng rng(7);
  const Tensor x = random_tensor(rng, 4, 6), y = random_tensor(rng, 4, 2);
  const Tensor noise = draw_gumbel_difference(4, rng);
  auto loss = [&](const ParamMap& theta, ParamMap* grads) {
    Tape tape;
    const BoundParams b = bind_params(tape, theta, grads != nullptr);
    const Var l = mae(forward_on_tape(tape, b, tape.constant(x), 1, noise, {}).prediction, tape.constant(y));
    if (grads) *grads = gradients(tape, l, b);
    return l.value().item();
  };
  ParamMap analytic;
  loss(p.tensors, &analytic);
  ParamMap theta = p.tensors;
  for (auto& [name, t] : theta) {
    if (is_meta_pe(name)) continue;  // not on the path without eta
    double worst = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + 1e-5;
      const double up = loss(theta, nullptr);
      t[i] = orig - 1e-5;
      const double down = loss(theta, nullptr);
      t[i] = orig;
      const double num = (up - down) / 2e-5, ana = analytic.at(name)[i];
      worst = std::max(worst, std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6}));
    }
    EXPECT_LT(worst, 1e-4) << name;
  }
}

TEST(Model, FullObjectiveGradcheck) {
  const GradcheckReport r = gradcheck();
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(r.entries.size(), 13u);
}

TEST(Model, NodePermutationEquivariance) {
  const ModelParams p = small_params(8);
  Rng rng(3);
  const Tensor x = random_tensor(rng, 4, 6);
  const Tensor noise = draw_gumbel_difference(4, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  auto permute_rows = [&](const Tensor& t) {
    Tensor out(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t c = 0; c < t.cols(); ++c) out(i, c) = t(perm[i], c);
    return out;
  };
  ModelParams pp = p;
  pp.at(param::node_embedding) = permute_rows(p.at(param::node_embedding));
  pp.at(param::pe_basis) = permute_rows(p.at(param::pe_basis));
  Tensor np(4, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) np(i, j) = noise(perm[i], perm[j]);
  for (bool memory : {true, false}) {
    const ForwardOptions opt{0.5, SampleMode::soft, memory};
    const Tensor y = forward(x, p, noise, opt).prediction;
    const Tensor yp = forward(permute_rows(x), pp, np, opt).prediction;
    EXPECT_LT(max_abs_diff(yp, permute_rows(y)), 1e-12);
  }
}

TEST(Model, HiddenStatesStayBounded) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelParams p = small_params(100 + static_cast<std::uint64_t>(trial));
    const auto tr = forward(random_tensor(rng, 4, 6, -5, 5), p, rng);
    for (const auto& h : tr.hidden)
      for (double v : h.values()) EXPECT_LE(std::abs(v), 1.0);
  }
}

TEST(Model, GradientReachesEmbeddingAndMemory) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelParams p = small_params(200 + static_cast<std::uint64_t>(trial));
    Tape tape;
    const BoundParams b = bind_params(tape, p.tensors);
    const Var l = mae(forward_on_tape(tape, b, tape.constant(random_tensor(rng, 4, 6)), 1,
                                      draw_gumbel_difference(4, rng), {})
                          .prediction,
                      tape.constant(random_tensor(rng, 4, 2)));
    const ParamMap g = gradients(tape, l, b);
    double ge = 0, gm = 0;
    for (double v : g.at(param::node_embedding).values()) ge += std::abs(v);
    for (double v : g.at(param::memory).values()) gm += std::abs(v);
    EXPECT_GT(ge, 0.0);
    EXPECT_GT(gm, 0.0);
  }
}

TEST(Model, RunsOnAnotherCityWithTransferredTensors) {
  const ModelParams src = small_params(12, 20);
  Rng rng(13);
  ModelParams tgt = init_params(small_dims(12), rng);
  for (auto& [name, t] : tgt.tensors) {
    if (transfer_class(name) == TransferClass::shared) t = src.at(name);
  }
  const auto tr = forward(random_tensor(rng, 12, 6), tgt, rng);
  EXPECT_EQ(tr.prediction.shape(), (Shape{12, 2}));
  EXPECT_TRUE(all_finite(tr.prediction));
}

TEST(Model, NoMemoryAblationUsesEmbeddingDirectly) {
  const ModelParams p = small_params(14);
  Rng rng(15);
  const Tensor noise = draw_gumbel_difference(4, rng);
  const auto tr = forward(random_tensor(rng, 4, 6), p, noise, {0.5, SampleMode::soft, false});
  EXPECT_TRUE(tr.top2.empty());
  EXPECT_TRUE(tr.address_weights.empty());
  EXPECT_EQ(tr.recovered, p.at(param::node_embedding));
  Tape tape;
  EXPECT_LT(max_abs_diff(tr.similarity, squashed_cosine_gram(tape.constant(p.at(param::node_embedding))).value()),
            1e-15);
}

TEST(Model, BatchedForwardMatchesPerSample) {
  const ModelParams p = small_params(16);
  Rng rng(17);
  const Tensor x1 = random_tensor(rng, 4, 6), x2 = random_tensor(rng, 4, 6);
  const Tensor noise = draw_gumbel_difference(4, rng);
  Tape tape;
  const BoundParams b = bind_params(tape, p.tensors, false);
  const Tensor both = forward_on_tape(tape, b, tape.constant(stack_rows({&x1, &x2})), 2, noise, {}).prediction.value();
  const Tensor y1 = forward(x1, p, noise).prediction, y2 = forward(x2, p, noise).prediction;
  EXPECT_LT(max_abs_diff(both, stack_rows({&y1, &y2})), 1e-13);
}
