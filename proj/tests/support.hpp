#pragma once

#include <vector>

#include "volseg/core/rng.hpp"
#include "volseg/core/tensor.hpp"

namespace volseg::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, bool requires_grad = false,
                                    double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace volseg::testing
