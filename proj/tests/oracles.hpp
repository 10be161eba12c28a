#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "volseg/train/data.hpp"

namespace volseg::testing {

/// All-pairs oracle: surface = in-mask voxel whose 6-neighbourhood (zero
/// padded) is not fully in the mask; distances over every voxel pair.
inline std::optional<double> brute_hd95(const LabelVolume& a, const LabelVolume& b, Index n,
                                       Index cls) {
  const Index p = n + 2;
  auto padded = [&](const LabelVolume& m) {
    std::vector<int> g(static_cast<std::size_t>(p * p * p), 0);
    for (Index h = 0; h < n; ++h)
      for (Index w = 0; w < n; ++w)
        for (Index d = 0; d < n; ++d)
          g[((h + 1) * p + w + 1) * p + d + 1] = m[(h * n + w) * n + d] == cls;
    return g;
  };
  auto surface = [&](const std::vector<int>& g) {
    std::vector<std::array<int, 3>> s;
    for (Index h = 1; h <= n; ++h)
      for (Index w = 1; w <= n; ++w)
        for (Index d = 1; d <= n; ++d) {
          auto at = [&](Index x, Index y, Index z) { return g[(x * p + y) * p + z]; };
          if (!at(h, w, d)) continue;
          const int inner = at(h - 1, w, d) + at(h + 1, w, d) + at(h, w - 1, d) +
                            at(h, w + 1, d) + at(h, w, d - 1) + at(h, w, d + 1);
          if (inner < 6) s.push_back({int(h), int(w), int(d)});
        }
    return s;
  };
  const auto sa = surface(padded(a)), sb = surface(padded(b));
  if (sa.empty() && sb.empty()) return 0.0;
  if (sa.empty() || sb.empty()) return std::nullopt;
  std::vector<double> all;
  for (int dir = 0; dir < 2; ++dir) {
    const auto& from = dir ? sb : sa;
    const auto& to = dir ? sa : sb;
    for (const auto& x : from) {
      double best = 1e300;
      for (const auto& y : to) {
        const double dx = x[0] - y[0], dy = x[1] - y[1], dz = x[2] - y[2];
        best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
      }
      all.push_back(best);
    }
  }
  std::sort(all.begin(), all.end());
  const double rank = 0.95 * static_cast<double>(all.size() - 1);
  const auto lo = static_cast<std::size_t>(rank);
  const auto hi = std::min(lo + 1, all.size() - 1);
  return all[lo] + (rank - static_cast<double>(lo)) * (all[hi] - all[lo]);
}

inline double brute_dice(const LabelVolume& a, const LabelVolume& b, Index cls) {
  double inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i] == cls;
    sb += b[i] == cls;
    inter += a[i] == cls && b[i] == cls;
  }
  return sa + sb == 0 ? 1.0 : 2 * inter / (sa + sb);
}

}  // namespace volseg::testing
