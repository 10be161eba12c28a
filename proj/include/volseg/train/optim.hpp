#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "volseg/core/errors.hpp"
#include "volseg/nn/params.hpp"

namespace volseg {

/// Linear warmup to `base` over `warmup` epochs, then cosine decay to zero at
/// `total`.
inline double lr_schedule(Index epoch, double base, Index warmup, Index total) {
  if (epoch < 0 || epoch >= total) {
    throw ConfigError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(total) + ")");
  }
  if (epoch < warmup) {
    return base * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
  }
  const double t = static_cast<double>(epoch - warmup) / static_cast<double>(total - warmup);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

/// Adam with L2 decay added to the gradient. Parameters without a gradient
/// are treated as having a zero one.
template <typename T>
class Adam {
 public:
  Adam(ParamStore<T>& params, AdamConfig cfg = {}) : params_(&params), cfg_(cfg) {
    for (const auto& e : params.entries()) {
      m_.emplace_back(static_cast<std::size_t>(e.value.numel()), T{0});
      v_.emplace_back(static_cast<std::size_t>(e.value.numel()), T{0});
    }
  }

  Index steps() const { return t_; }

  /// Validates every gradient first, so a NumericError leaves all parameters
  /// and moments untouched.
  void step(double lr) {
    const auto& entries = params_->entries();
    for (const auto& e : entries) {
      if (!e.value.has_grad()) continue;
      for (T g : e.value.grad()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericError("non-finite gradient in parameter '" + e.name + "'");
        }
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < entries.size(); ++p) {
      Tensor<T> theta = entries[p].value;
      auto x = theta.data();
      const bool has = theta.has_grad();
      auto grad = theta.grad();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double g = (has ? static_cast<double>(grad[i]) : 0.0) +
                         cfg_.weight_decay * static_cast<double>(x[i]);
        const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps);
        x[i] = static_cast<T>(static_cast<double>(x[i]) - update);
      }
    }
  }

 private:
  ParamStore<T>* params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  Index t_ = 0;
};

}  // namespace volseg
