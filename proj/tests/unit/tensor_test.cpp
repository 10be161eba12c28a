#include <gtest/gtest.h>

#include <unordered_map>

#include "support.hpp"
#include "volseg/core/linalg.hpp"
#include "volseg/core/ops.hpp"

using namespace volseg;
using volseg::testing::random_tensor;

TEST(Tensor, FactoriesHonourShape) {
  auto t = Tensor<double>::full({2, 3, 4}, 1.5);
  EXPECT_EQ(t.numel(), 24);
  EXPECT_EQ(t.rank(), 3);
  EXPECT_EQ(t.values()[23], 1.5);
  EXPECT_THROW(Tensor<double>::zeros({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<double>::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, GradHasDataShapeAndSkipsFrozenInputs) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng, true);
  auto b = random_tensor({3, 4}, rng, false);
  backward(sum(mul(a, b)));
  ASSERT_TRUE(a.has_grad());
  EXPECT_EQ(a.grad().size(), a.values().size());
  EXPECT_FALSE(b.has_grad());
  for (std::size_t i = 0; i < 12; ++i) EXPECT_DOUBLE_EQ(a.grad()[i], b.values()[i]);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  auto a = Tensor<double>::full({2}, 1.0, true);
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = scale(a, 2.0);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Tape, TopologicalOrderAndSingleVisit) {
  Rng rng(2);
  auto x = random_tensor({4}, rng, true);
  auto h = relu(x);
  // diamond: h feeds both branches
  auto y = add(scale(h, 2.0), mul(h, h));
  auto root = sum(y);
  auto tape = Tape<double>::record(root);
  std::unordered_map<const Node<double>*, std::size_t> pos;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    EXPECT_TRUE(pos.emplace(tape.nodes()[i], i).second) << "node recorded twice";
  }
  for (auto* n : tape.nodes()) {
    for (const auto& in : n->inputs) {
      if (!in->requires_grad) continue;
      ASSERT_TRUE(pos.count(in.get()));
      EXPECT_LT(pos[in.get()], pos[n]);
    }
  }
  EXPECT_EQ(tape.nodes().back(), root.node().get());
  backward(root);
  for (int i = 0; i < 4; ++i) {
    const double v = x.values()[i];
    const double expected = v > 0 ? 2.0 + 2.0 * v : 0.0;
    EXPECT_NEAR(x.grad()[i], expected, 1e-14);
  }
}

TEST(Tape, BackwardIsBitDeterministic) {
  auto run = [] {
    Rng rng(3);
    auto a = random_tensor({5, 7}, rng, true);
    auto b = random_tensor({7, 3}, rng, true);
    backward(sum(softmax_lastdim(matmul(a, b))));
    std::vector<double> g(a.grad().begin(), a.grad().end());
    g.insert(g.end(), b.grad().begin(), b.grad().end());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, BackwardNeedsScalarRoot) {
  auto a = Tensor<double>::full({3}, 1.0, true);
  EXPECT_THROW(backward(scale(a, 2.0)), ShapeError);
}

TEST(Tape, LeafFlagIsImmutableOnResults) {
  auto a = Tensor<double>::full({3}, 1.0, true);
  auto y = scale(a, 2.0);
  EXPECT_THROW(y.set_requires_grad(false), std::logic_error);
}
