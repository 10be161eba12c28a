#include <gtest/gtest.h>

#include <limits>

#include "support.hpp"
#include "volseg/core/gradcheck.hpp"
#include "volseg/core/linalg.hpp"

using namespace volseg;
using volseg::testing::random_tensor;

TEST(GradCheckTool, SumHasZeroError) {
  // dyadic values and a power-of-two step keep every difference exact
  std::vector<double> v(12);
  for (int i = 0; i < 12; ++i) v[i] = (i - 5) * 0.125;
  auto x = Tensor<double>::from({3, 4}, v, true);
  GradCheckOptions opts;
  opts.step = 0x1p-20;
  auto report = grad_check([](const auto& in) { return sum(in[0]); }, {{"x", x}}, opts);
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  EXPECT_EQ(report.worst(), 0.0);
}

TEST(GradCheckTool, SquareSum) {
  Rng rng(41);
  auto x = random_tensor({10}, rng, true);
  // central differences are exact for a quadratic, so a wide step only
  // reduces cancellation error
  GradCheckOptions opts;
  opts.step = 1e-3;
  auto report =
      grad_check([](const auto& in) { return sum(mul(in[0], in[0])); }, {{"x", x}}, opts);
  for (int i = 0; i < 10; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.values()[i]);
  EXPECT_LT(report.worst(), 1e-9);
}

TEST(GradCheckTool, NonFiniteNamesIndex) {
  auto x = Tensor<double>::from({3}, {1.0, std::numeric_limits<double>::infinity(), 2.0}, true);
  try {
    grad_check([](const auto& in) { return sum(mul(in[0], in[0])); }, {{"x", x}});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
  auto y = Tensor<double>::from({3}, {1.0, 2.0, 3.0}, true);
  try {
    grad_check(
        [](const auto& in) {
          // blows up only when element 1 is perturbed upward
          auto v = in[0].values();
          if (v[1] > 2.0) return scale(sum(in[0]), std::numeric_limits<double>::infinity());
          return sum(in[0]);
        },
        {{"y", y}});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos) << e.what();
  }
}

TEST(GradCheckTool, DetectsInjectedFault) {
  Rng rng(42);
  auto a = random_tensor({3, 4}, rng, true);
  auto b = random_tensor({4, 2}, rng, true);
  auto f = [](const std::vector<Tensor<double>>& in) { return relu(matmul(in[0], in[1])); };
  EXPECT_TRUE(grad_check(f, {{"a", a}, {"b", b}}).passed());
  GradientFaultScope fault("matmul");
  auto report = grad_check(f, {{"a", a}, {"b", b}});
  EXPECT_FALSE(report.passed());
  EXPECT_GT(report.worst(), 1e-3);
}

TEST(GradCheckTool, ProbeSubsetIsDeterministic) {
  Rng rng(43);
  auto x = random_tensor({50}, rng, true);
  GradCheckOptions opts;
  opts.max_probes = 7;
  auto r1 = grad_check([](const auto& in) { return gelu(in[0]); }, {{"x", x}}, opts);
  auto r2 = grad_check([](const auto& in) { return gelu(in[0]); }, {{"x", x}}, opts);
  EXPECT_EQ(r1.entries[0].probed, 7);
  EXPECT_EQ(r1.entries[0].worst_index, r2.entries[0].worst_index);
  EXPECT_EQ(r1.worst(), r2.worst());
}
