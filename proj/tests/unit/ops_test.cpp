#include <gtest/gtest.h>

#include "support.hpp"
#include "volseg/core/gradcheck.hpp"
#include "volseg/core/linalg.hpp"
#include "volseg/core/ops.hpp"

using namespace volseg;
using volseg::testing::random_tensor;

TEST(Pointwise, ReluOfNegativeIsZero) {
  auto x = Tensor<double>::from({3}, {-0.5, -2.0, -1e-9});
  auto y = relu(x);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Pointwise, ConcatAddsChannels) {
  auto a = Tensor<double>::zeros({2, 3, 3, 3});
  auto b = Tensor<double>::zeros({5, 3, 3, 3});
  EXPECT_EQ(concat<double>({a, b}).shape(), (Shape{7, 3, 3, 3}));
  EXPECT_THROW(concat<double>({a, Tensor<double>::zeros({1, 3, 3, 2})}), ShapeError);
}

TEST(Pointwise, PermuteThenInverseIsIdentity) {
  Rng rng(4);
  auto x = random_tensor({2, 3, 4, 5}, rng);
  const std::vector<Index> perm{2, 0, 3, 1};
  std::vector<Index> inv(4);
  for (Index i = 0; i < 4; ++i) inv[perm[i]] = i;
  auto p = permute(x, perm);
  EXPECT_EQ(p.shape(), (Shape{4, 2, 5, 3}));
  auto back = permute(p, inv);
  EXPECT_EQ(back.values(), x.values());
  // explicit index check against the definition
  EXPECT_EQ(p.values()[((1 * 2 + 1) * 5 + 4) * 3 + 2], x.values()[((1 * 3 + 2) * 4 + 1) * 5 + 4]);
}

TEST(Pointwise, ShapeMismatchIsRejected) {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({3, 2});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(reshape(a, {5}), ShapeError);
}

TEST(Pointwise, DropoutDefaultsToIdentity) {
  Rng rng(5);
  auto x = random_tensor({10}, rng);
  EXPECT_EQ(dropout(x, 0.5, rng, false).values(), x.values());
  auto y = dropout(x, 0.5, rng, true);
  int zeros = 0;
  for (double v : y.values()) zeros += v == 0.0;
  EXPECT_GT(zeros, 0);
}

TEST(Matmul, IdentityAndScalar) {
  Rng rng(6);
  auto m = random_tensor({3, 4}, rng);
  std::vector<double> eye(9, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  EXPECT_EQ(matmul(Tensor<double>::from({3, 3}, eye), m).values(), m.values());
  EXPECT_DOUBLE_EQ(matmul(Tensor<double>::from({1, 1}, {3.0}),
                          Tensor<double>::from({1, 1}, {-2.5}))
                       .item(),
                   -7.5);
  EXPECT_THROW(matmul(m, m), ShapeError);
}

TEST(Matmul, MatchesNaiveTripleLoop) {
  Rng rng(7);
  auto a = random_tensor({5, 7}, rng);
  auto b = random_tensor({7, 3}, rng);
  auto c = matmul(a, b);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 7; ++k) acc += a.values()[i * 7 + k] * b.values()[k * 3 + j];
      EXPECT_NEAR(c.values()[i * 3 + j], acc, 1e-12);
    }
  }
}

TEST(Matmul, BatchedTransposedMatchesNaive) {
  Rng rng(8);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 5, 4}, rng);
  auto c = bmm(a, b, true);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k)
          acc += a.values()[(n * 3 + i) * 4 + k] * b.values()[(n * 5 + j) * 4 + k];
        EXPECT_NEAR(c.values()[(n * 3 + i) * 5 + j], acc, 1e-12);
      }
}

TEST(Softmax, UniformRowAndStability) {
  auto u = softmax_lastdim(Tensor<double>::full({2, 4}, 3.0));
  for (double v : u.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  auto s = softmax_lastdim(Tensor<double>::from({1, 2}, {1000.0, 0.0}));
  EXPECT_NEAR(s.values()[0], 1.0, 1e-15);
  EXPECT_NEAR(s.values()[1], 0.0, 1e-15);
  EXPECT_TRUE(std::isfinite(s.values()[1]));
}

TEST(Softmax, RowsSumToOneOnRandomInputs) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({3, 1 + static_cast<Index>(rng.below(9))}, rng, false, -30, 30);
    auto y = softmax_lastdim(x);
    const Index n = y.dim(1);
    for (Index r = 0; r < 3; ++r) {
      double total = 0.0;
      for (Index j = 0; j < n; ++j) {
        const double v = y.values()[r * n + j];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(LayerNorm, ZeroMeanAndConstantToken) {
  Rng rng(10);
  auto x = random_tensor({4, 6}, rng, false, -5, 5);
  auto g = Tensor<double>::full({6}, 1.0), b = Tensor<double>::zeros({6});
  auto y = layer_norm(x, g, b);
  for (int r = 0; r < 4; ++r) {
    double mean = 0.0;
    for (int j = 0; j < 6; ++j) mean += y.values()[r * 6 + j];
    EXPECT_LT(std::abs(mean / 6), 1e-10);
  }
  auto flat = layer_norm(Tensor<double>::full({2, 6}, 4.2), g, b);
  for (double v : flat.values()) EXPECT_EQ(v, 0.0);
}

TEST(GradCheck, PrimitiveJacobians) {
  Rng rng(11);
  auto a = random_tensor({3, 5}, rng, true);
  auto b = random_tensor({5, 4}, rng, true);
  auto g = random_tensor({4}, rng, true, 0.5, 1.5);
  auto bt = random_tensor({4}, rng, true);
  auto report = grad_check(
      [](const std::vector<Tensor<double>>& in) {
        auto h = matmul(in[0], in[1]);
        auto n = layer_norm(h, in[2], in[3]);
        return softmax_lastdim(gelu(n));
      },
      {{"a", a}, {"b", b}, {"gamma", g}, {"beta", bt}});
  for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-5) << e.name;
}

TEST(GradCheck, ShapeOpsAndGroupNorm) {
  Rng rng(12);
  auto x = random_tensor({4, 2, 3, 2}, rng, true);
  auto y = random_tensor({2, 2, 3, 2}, rng, true);
  auto gm = random_tensor({6}, rng, true, 0.5, 1.5);
  auto bt = random_tensor({6}, rng, true);
  auto bias = random_tensor({2}, rng, true);
  auto report = grad_check(
      [](const std::vector<Tensor<double>>& in) {
        auto c = concat<double>({in[0], in[1]});
        auto n = group_norm(c, 3, in[2], in[3]);
        auto p = permute(reshape(n, {6, 12}), {1, 0});
        auto s = sub(p, scale(p, 0.3));
        return add_row_bias(reshape(s, {36, 2}), in[4]);
      },
      {{"x", x}, {"y", y}, {"gamma", gm}, {"beta", bt}, {"bias", bias}});
  for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-5) << e.name;
}

TEST(GradCheck, BmmBothLayouts) {
  Rng rng(13);
  auto a = random_tensor({2, 3, 4}, rng, true);
  auto b = random_tensor({2, 4, 5}, rng, true);
  auto c = random_tensor({2, 6, 5}, rng, true);
  auto report = grad_check(
      [](const std::vector<Tensor<double>>& in) {
        return bmm(bmm(in[0], in[1]), in[2], true);
      },
      {{"a", a}, {"b", b}, {"c", c}});
  EXPECT_TRUE(report.passed());
  EXPECT_LT(report.worst(), 1e-6);
}
