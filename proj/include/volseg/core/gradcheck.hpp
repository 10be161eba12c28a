#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "volseg/core/ops.hpp"
#include "volseg/core/rng.hpp"
#include "volseg/core/tensor.hpp"

namespace volseg {

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  /// Probe at most this many elements per input (0 = all), chosen by a
  /// seeded shuffle.
  Index max_probes = 0;
  std::uint64_t seed = 0x5eed;
};

struct GradCheckEntry {
  std::string name;
  Index probed = 0;
  double max_rel_error = 0.0;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(),
                       [](const GradCheckEntry& e) { return e.passed; });
  }
  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

using NamedInput = std::pair<std::string, Tensor<double>>;

/// Compares tape gradients of `f` against central differences. Non-scalar
/// outputs are reduced with fixed pseudo-random weights in [0.5, 1.5).
/// Inputs must be leaves with requires_grad set.
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
    const std::vector<NamedInput>& inputs, const GradCheckOptions& opts = {}) {
  std::vector<Tensor<double>> xs;
  for (const auto& [name, t] : inputs) {
    if (!t.is_leaf() || !t.requires_grad()) {
      throw std::invalid_argument("grad_check input '" + name +
                                  "' must be a leaf requiring grad");
    }
    xs.push_back(t);
  }
  std::vector<double> weights;
  auto scalarize = [&](const Tensor<double>& y) {
    if (y.numel() == 1) return y;
    if (weights.empty()) {
      Rng rng(mix_seed(opts.seed, 0x77));
      weights.resize(static_cast<std::size_t>(y.numel()));
      for (auto& w : weights) w = rng.uniform(0.5, 1.5);
    }
    return weighted_sum(y, weights);
  };
  auto check_finite = [](double v, const std::string& name, Index i, const char* what) {
    if (!std::isfinite(v)) {
      throw NumericError("grad_check: non-finite " + std::string(what) + " for input '" +
                         name + "' at index " + std::to_string(i));
    }
  };

  for (auto& x : xs) x.zero_grad();
  auto root = scalarize(f(xs));
  check_finite(root.item(), inputs.front().first, -1, "function value");
  backward(root);

  GradCheckReport report;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    auto& x = xs[k];
    const std::string& name = inputs[k].first;
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(x.numel()), 0.0);

    std::vector<Index> probes(static_cast<std::size_t>(x.numel()));
    for (Index i = 0; i < x.numel(); ++i) probes[i] = i;
    if (opts.max_probes > 0 && x.numel() > opts.max_probes) {
      Rng rng(mix_seed(opts.seed, fnv1a(name)));
      for (Index i = x.numel() - 1; i > 0; --i) {
        std::swap(probes[i], probes[rng.below(static_cast<std::uint64_t>(i + 1))]);
      }
      probes.resize(static_cast<std::size_t>(opts.max_probes));
      std::sort(probes.begin(), probes.end());
    }

    GradCheckEntry entry;
    entry.name = name;
    entry.probed = static_cast<Index>(probes.size());
    for (Index i : probes) {
      NoGradGuard no_grad;
      auto data = x.data();
      const double saved = data[i];
      data[i] = saved + opts.step;
      const double up = scalarize(f(xs)).item();
      data[i] = saved - opts.step;
      const double down = scalarize(f(xs)).item();
      data[i] = saved;
      check_finite(up, name, i, "perturbed value");
      check_finite(down, name, i, "perturbed value");
      check_finite(analytic[i], name, i, "analytic gradient");
      const double numeric = (up - down) / (2.0 * opts.step);
      const double err = relative_error(analytic[i], numeric);
      if (err > entry.max_rel_error || entry.worst_index < 0) {
        entry.max_rel_error = std::max(entry.max_rel_error, err);
        if (err >= entry.max_rel_error) {
          entry.worst_index = i;
          entry.analytic = analytic[i];
          entry.numeric = numeric;
        }
      }
    }
    entry.passed = entry.max_rel_error <= opts.tolerance;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace volseg
