#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace ssmt;
using ssmt::testing::max_grad_error;
using ssmt::testing::random_tensor;

TEST(Metrics, HandExample) {
  const Tensor y{{1, 2}, {3, 4}}, yhat{{2, 2}, {3, 2}};
  EXPECT_DOUBLE_EQ(mae(yhat, y), 0.75);
  EXPECT_NEAR(rmse(yhat, y), 1.118033988749895, 1e-12);
  EXPECT_DOUBLE_EQ(mae(y, yhat), mae(yhat, y));
  EXPECT_EQ(mae(y, y), 0.0);
  EXPECT_EQ(rmse(y, y), 0.0);
  Tape tape;
  EXPECT_DOUBLE_EQ(mae(tape.constant(yhat), tape.constant(y)).value().item(), 0.75);
  EXPECT_THROW(mae(y, Tensor(2, 3)), ShapeError);
  EXPECT_THROW(rmse(y, Tensor(1, 2)), ShapeError);
}

TEST(Metrics, RmseDominatesMae) {
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const std::size_t r = 1 + rng.index(6), c = 1 + rng.index(6);
    const Tensor a = random_tensor(rng, r, c, -10, 10), b = random_tensor(rng, r, c, -10, 10);
    EXPECT_GE(rmse(a, b) + 1e-12, mae(a, b));
  }
}

TEST(Metrics, MaeComposesOverEqualSamples) {
  Rng rng(4);
  const Tensor a1 = random_tensor(rng, 3, 2), a2 = random_tensor(rng, 3, 2);
  const Tensor b1 = random_tensor(rng, 3, 2), b2 = random_tensor(rng, 3, 2);
  const Tensor a = stack_rows({&a1, &a2}), b = stack_rows({&b1, &b2});
  EXPECT_NEAR(mae(a, b), 0.5 * (mae(a1, b1) + mae(a2, b2)), 1e-15);
}

TEST(SeparateLoss, HingeCases) {
  // anchor sits on M_p and M_n is 2 away with margin 1
  const Tensor mem{{0, 0}, {2, 0}};
  EXPECT_EQ(separate_loss(Tensor{{0, 0}}, mem, {{0, 1}}, 1.0), 0.0);
  // equidistant anchor leaves the margin
  EXPECT_DOUBLE_EQ(separate_loss(Tensor{{1, 5}}, mem, {{0, 1}}, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(separate_loss(Tensor{{1, 5}}, mem, {{0, 1}}, 0.3), 0.3);
  // two anchors over two samples
  EXPECT_DOUBLE_EQ(separate_loss(Tensor{{1, 5}, {1, -2}}, mem, {{0, 1}, {1, 0}}, 1.0, 2), 1.0);
  EXPECT_THROW(separate_loss(Tensor{{0, 0}}, Tensor{{0, 0}}, {{0, 0}}, 1.0), ShapeError);
  EXPECT_THROW(separate_loss(Tensor{{0, 0}}, mem, {{0, 1}, {1, 0}}, 1.0), ShapeError);
}

TEST(CompactLoss, HandCases) {
  EXPECT_DOUBLE_EQ(compact_loss(Tensor{{0, 0}}, Tensor{{3, 4}, {0, 0}}, {{0, 1}}), 5.0);
  EXPECT_EQ(compact_loss(Tensor{{3, 4}, {0, 0}}, Tensor{{3, 4}, {0, 0}}, {{0, 1}, {1, 0}}), 0.0);
  EXPECT_DOUBLE_EQ(compact_loss(Tensor{{0, 0}, {0, 0}}, Tensor{{3, 4}, {0, 0}}, {{0, 1}, {0, 1}}, 2), 5.0);
}

TEST(TotalLoss, WeightedSum) {
  EXPECT_NEAR(total_loss(0.75, 0.5, 0.2, LossWeights{}), 0.535, 1e-15);
  EXPECT_EQ(total_loss(0.75, 0.5, 0.2, LossWeights{1, 0, 0, 1}), 0.75);
  EXPECT_EQ(total_loss(0, 0, 0, LossWeights{}), 0.0);
  Tape tape;
  EXPECT_NEAR(total_loss(tape.constant(Tensor::scalar(0.75)), tape.constant(Tensor::scalar(0.5)),
                         tape.constant(Tensor::scalar(0.2)), LossWeights{})
                  .value()
                  .item(),
              0.535, 1e-15);
}

TEST(MemoryLosses, NonnegativeAndAdditiveOverSamples) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(5), b = 2 + rng.index(5), d = 1 + rng.index(4);
    const Tensor mem = random_tensor(rng, b, d);
    const Tensor o1 = random_tensor(rng, n, d), o2 = random_tensor(rng, n, d);
    const auto t1 = memory_address(o1, mem).top2;
    const auto t2 = memory_address(o2, mem).top2;
    std::vector<TopTwo> both = t1;
    both.insert(both.end(), t2.begin(), t2.end());
    const Tensor o = stack_rows({&o1, &o2});
    const double margin = rng.uniform() * 2;
    const double s1 = separate_loss(o1, mem, t1, margin), s2 = separate_loss(o2, mem, t2, margin);
    const double c1 = compact_loss(o1, mem, t1), c2 = compact_loss(o2, mem, t2);
    EXPECT_GE(s1, 0.0);
    EXPECT_GE(c1, 0.0);
    EXPECT_NEAR(separate_loss(o, mem, both, margin), s1 + s2, 1e-12);
    EXPECT_NEAR(compact_loss(o, mem, both), c1 + c2, 1e-12);
    EXPECT_NEAR(separate_loss(o, mem, both, margin, 2), 0.5 * (s1 + s2), 1e-12);
  }
}

TEST(MemoryLosses, GradientsAwayFromKinks) {
  Rng rng(6);
  int checked = 0;
  for (int trial = 0; trial < 100 && checked < 20; ++trial) {
    const Tensor o = random_tensor(rng, 3, 4), mem = random_tensor(rng, 4, 4);
    const auto top2 = memory_address(o, mem).top2;
    const double margin = 0.4;
    // skip instances near a hinge boundary or a zero distance
    bool near_kink = false;
    for (std::size_t a = 0; a < 3; ++a) {
      double dp = 0, dn = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        dp += std::pow(o(a, k) - mem(top2[a][0], k), 2);
        dn += std::pow(o(a, k) - mem(top2[a][1], k), 2);
      }
      dp = std::sqrt(dp);
      dn = std::sqrt(dn);
      if (std::abs(dp - dn + margin) < 1e-3 || dp < 1e-3 || dn < 1e-3) near_kink = true;
    }
    if (near_kink) continue;
    ++checked;
    EXPECT_LT(max_grad_error(
                  [&](Tape&, const std::vector<Var>& v) { return separate_loss(v[0], v[1], top2, margin, 2); }, {o, mem}),
              1e-6);
    EXPECT_LT(max_grad_error([&](Tape&, const std::vector<Var>& v) { return compact_loss(v[0], v[1], top2, 2); },
                             {o, mem}),
              1e-6);
    EXPECT_LT(max_grad_error(
                  [&](Tape& tape, const std::vector<Var>& v) {
                    return total_loss(mae(v[0], tape.constant(Tensor(3, 4, 5.0))), separate_loss(v[0], v[1], top2, margin),
                                      compact_loss(v[0], v[1], top2), LossWeights{});
                  },
                  {o, mem}),
              1e-6);
  }
  EXPECT_EQ(checked, 20);
}
