#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "volseg/core/errors.hpp"
#include "volseg/core/tensor.hpp"

namespace volseg {

inline constexpr double kDiceEps = 1e-5;

/// Softmax over axis 0 of a K x (spatial...) tensor, no history.
template <typename T>
std::vector<T> class_probabilities(const Tensor<T>& logits) {
  const Index k = logits.dim(0), vox = logits.numel() / k;
  const auto& z = logits.values();
  std::vector<T> p(z.size());
  for (Index v = 0; v < vox; ++v) {
    T m = z[v];
    for (Index c = 1; c < k; ++c) m = std::max(m, z[c * vox + v]);
    T sum = 0;
    for (Index c = 0; c < k; ++c) {
      const T e = std::exp(z[c * vox + v] - m);
      p[c * vox + v] = e;
      sum += e;
    }
    for (Index c = 0; c < k; ++c) p[c * vox + v] /= sum;
  }
  return p;
}

/// 1 - mean over foreground classes of (2 sum p g + eps) / (sum p + sum g + eps),
/// with p the class softmax of `logits` (K x H x W x D) and g the one-hot label.
template <typename T>
Tensor<T> softmax_dice_loss(const Tensor<T>& logits, const std::vector<std::uint8_t>& label,
                            double eps = kDiceEps) {
  const Index k = logits.dim(0), vox = logits.numel() / k;
  if (k < 2) throw ShapeError("dice loss needs at least two classes");
  if (static_cast<Index>(label.size()) != vox) {
    throw ShapeError("label has " + std::to_string(label.size()) + " voxels, logits have " +
                     std::to_string(vox));
  }
  for (auto l : label) {
    if (l >= k) throw ShapeError("label value " + std::to_string(l) + " out of range");
  }
  auto p = class_probabilities(logits);
  std::vector<double> inter(k, 0.0), psum(k, 0.0), gsum(k, 0.0);
  for (Index c = 1; c < k; ++c) {
    for (Index v = 0; v < vox; ++v) {
      const double pv = p[c * vox + v];
      psum[c] += pv;
      if (label[v] == c) {
        inter[c] += pv;
        gsum[c] += 1.0;
      }
    }
  }
  const double fg = static_cast<double>(k - 1);
  double mean_dice = 0.0;
  for (Index c = 1; c < k; ++c) {
    mean_dice += (2.0 * inter[c] + eps) / (psum[c] + gsum[c] + eps);
  }
  mean_dice /= fg;
  auto ln = logits.node();
  return detail::make_result<T>(
      "dice_loss", Shape{1}, std::vector<T>{static_cast<T>(1.0 - mean_dice)}, {&logits},
      [ln, p = std::move(p), inter, psum, gsum, label, k, vox, eps, fg](const std::vector<T>& g) {
        auto& dst = ln->grad_buffer();
        const double up = g[0];
        // dL/dp_c = -(1/F) (2 g_c / den_c - num_c / den_c^2) for foreground c
        std::vector<double> a(k, 0.0), b(k, 0.0);
        for (Index c = 1; c < k; ++c) {
          const double den = psum[c] + gsum[c] + eps;
          a[c] = -2.0 / (fg * den);
          b[c] = (2.0 * inter[c] + eps) / (fg * den * den);
        }
        std::vector<double> dp(k);
        for (Index v = 0; v < vox; ++v) {
          double dot = 0.0;
          for (Index c = 0; c < k; ++c) {
            dp[c] = c == 0 ? 0.0 : (label[v] == c ? a[c] : 0.0) + b[c];
            dot += p[c * vox + v] * dp[c];
          }
          for (Index c = 0; c < k; ++c) {
            const double pv = p[c * vox + v];
            dst[c * vox + v] += static_cast<T>(up * pv * (dp[c] - dot));
          }
        }
      });
}

}  // namespace volseg
