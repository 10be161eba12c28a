#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "volseg/core/errors.hpp"
#include "volseg/core/tensor.hpp"

namespace volseg {

/// Class index of the largest probability per voxel (ties go to the lower
/// class). `probs` is K x V.
template <typename T>
std::vector<std::uint8_t> argmax_labels(const std::vector<T>& probs, Index k) {
  const Index vox = static_cast<Index>(probs.size()) / k;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(vox), 0);
  for (Index v = 0; v < vox; ++v) {
    Index best = 0;
    for (Index c = 1; c < k; ++c) {
      if (probs[c * vox + v] > probs[best * vox + v]) best = c;
    }
    out[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// 2|A n B| / (|A| + |B|) for the voxels labelled `cls`; 1 when both are empty.
inline double dice_score(const std::vector<std::uint8_t>& pred,
                         const std::vector<std::uint8_t>& truth, Index cls) {
  if (pred.size() != truth.size()) throw ShapeError("dice_score: label volumes differ in size");
  std::uint64_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool x = pred[i] == cls, y = truth[i] == cls;
    a += x;
    b += y;
    both += x && y;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

namespace detail {

/// Coordinates of mask voxels with a 6-neighbour outside the mask or the volume.
inline std::vector<std::array<Index, 3>> surface_voxels(const std::vector<std::uint8_t>& label,
                                                        const Triple& size, Index cls) {
  std::vector<std::array<Index, 3>> out;
  auto in_mask = [&](Index h, Index w, Index d) {
    if (h < 0 || w < 0 || d < 0 || h >= size[0] || w >= size[1] || d >= size[2]) return false;
    return label[(h * size[1] + w) * size[2] + d] == cls;
  };
  static constexpr int kNbr[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                     {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (Index h = 0; h < size[0]; ++h)
    for (Index w = 0; w < size[1]; ++w)
      for (Index d = 0; d < size[2]; ++d) {
        if (!in_mask(h, w, d)) continue;
        for (const auto& n : kNbr) {
          if (!in_mask(h + n[0], w + n[1], d + n[2])) {
            out.push_back({h, w, d});
            break;
          }
        }
      }
  return out;
}

inline void directed_distances(const std::vector<std::array<Index, 3>>& from,
                               const std::vector<std::array<Index, 3>>& to,
                               std::vector<double>& out) {
  for (const auto& a : from) {
    Index best = -1;
    for (const auto& b : to) {
      const Index dh = a[0] - b[0], dw = a[1] - b[1], dd = a[2] - b[2];
      const Index sq = dh * dh + dw * dw + dd * dd;
      if (best < 0 || sq < best) best = sq;
    }
    out.push_back(std::sqrt(static_cast<double>(best)));
  }
}

}  // namespace detail

/// Linear-interpolated percentile (q in [0, 100]) of unsorted values.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (rank - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// 95th percentile of both directed surface-distance sets pooled, in voxels.
/// 0 when both masks are empty; nullopt when exactly one is.
inline std::optional<double> hd95(const std::vector<std::uint8_t>& pred,
                                  const std::vector<std::uint8_t>& truth, const Triple& size,
                                  Index cls) {
  if (pred.size() != truth.size() ||
      static_cast<Index>(pred.size()) != size[0] * size[1] * size[2]) {
    throw ShapeError("hd95: label volumes do not match the given size");
  }
  const auto sa = detail::surface_voxels(pred, size, cls);
  const auto sb = detail::surface_voxels(truth, size, cls);
  if (sa.empty() && sb.empty()) return 0.0;
  if (sa.empty() || sb.empty()) return std::nullopt;
  std::vector<double> d;
  d.reserve(sa.size() + sb.size());
  detail::directed_distances(sa, sb, d);
  detail::directed_distances(sb, sa, d);
  return percentile(std::move(d), 95.0);
}

// Confidence histogram ---------------------------------------------------------

inline constexpr std::array<double, 5> kConfidenceEdges{0.0, 0.1, 0.5, 0.9, 1.0};

inline std::size_t confidence_bin(double p) {
  if (p < 0.1) return 0;
  if (p < 0.5) return 1;
  if (p < 0.9) return 2;
  return 3;
}

struct ConfidenceHistogram {
  Index cls = 0;
  std::array<std::uint64_t, 4> counts{};

  std::uint64_t total() const { return counts[0] + counts[1] + counts[2] + counts[3]; }
  std::array<double, 4> proportions() const {
    std::array<double, 4> out{};
    const double n = static_cast<double>(total());
    if (n == 0) return out;
    for (std::size_t i = 0; i < 4; ++i) out[i] = static_cast<double>(counts[i]) / n;
    return out;
  }
};

/// Per foreground class, counts of the max-class probability over voxels whose
/// true label is that class. `probs` is K x V.
template <typename T>
std::vector<ConfidenceHistogram> confidence_histogram(const std::vector<T>& probs,
                                                      const std::vector<std::uint8_t>& truth,
                                                      Index k) {
  const Index vox = static_cast<Index>(truth.size());
  if (static_cast<Index>(probs.size()) != k * vox) {
    throw ShapeError("confidence_histogram: probabilities do not match the label volume");
  }
  std::vector<ConfidenceHistogram> out(static_cast<std::size_t>(k - 1));
  for (Index c = 1; c < k; ++c) out[c - 1].cls = c;
  for (Index v = 0; v < vox; ++v) {
    if (truth[v] == 0) continue;
    double m = probs[v];
    for (Index c = 1; c < k; ++c) m = std::max(m, static_cast<double>(probs[c * vox + v]));
    out[truth[v] - 1].counts[confidence_bin(m)]++;
  }
  return out;
}

// Records ---------------------------------------------------------------------

struct MetricsRecord {
  Index epoch = -1;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<double> dice;                 // foreground classes 1..K-1
  std::vector<std::optional<double>> hd95;  // mean over samples where defined
  std::vector<ConfidenceHistogram> confidence;

  double mean_dice() const {
    if (dice.empty()) return 0.0;
    double s = 0.0;
    for (double d : dice) s += d;
    return s / static_cast<double>(dice.size());
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["loss"] = loss;
    j["lr"] = lr;
    if (!dice.empty()) {
      j["dice"] = dice;
      j["mean_dice"] = mean_dice();
      auto h = nlohmann::ordered_json::array();
      for (const auto& v : hd95) h.push_back(v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr));
      j["hd95"] = h;
      auto c = nlohmann::ordered_json::array();
      for (const auto& hist : confidence) {
        nlohmann::ordered_json e;
        e["class"] = hist.cls;
        e["voxels"] = hist.total();
        e["proportions"] = hist.proportions();
        c.push_back(e);
      }
      j["confidence"] = c;
    }
    return j;
  }
};

}  // namespace volseg
