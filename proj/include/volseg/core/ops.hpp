#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "volseg/core/rng.hpp"
#include "volseg/core/tensor.hpp"

// Elementwise and shape-manipulation primitives. Broadcasting is limited to
// the explicit bias forms (row bias, channel affine) and scalar scaling.

namespace volseg {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        std::string_view what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
}

inline std::vector<Index> strides_of(const Shape& shape) {
  std::vector<Index> strides(shape.size(), 1);
  for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      "add", a.shape(), std::move(out), {&a, &b},
      [an, bn](const std::vector<T>& g) {
        for (auto* n : {an.get(), bn.get()}) {
          if (!n->requires_grad) continue;
          auto& dst = n->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      "sub", a.shape(), std::move(out), {&a, &b},
      [an, bn](const std::vector<T>& g) {
        if (an->requires_grad) {
          auto& dst = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
        if (bn->requires_grad) {
          auto& dst = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      "mul", a.shape(), std::move(out), {&a, &b},
      [an, bn](const std::vector<T>& g) {
        if (an->requires_grad) {
          auto& dst = an->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * bn->data[i];
        }
        if (bn->requires_grad) {
          auto& dst = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * an->data[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= factor;
  auto an = a.node();
  return detail::make_result<T>(
      "scale", a.shape(), std::move(out), {&a},
      [an, factor](const std::vector<T>& g) {
        auto& dst = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * factor;
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = v > T{0} ? v : T{0};
  detail::count_aux(out.size());
  auto an = a.node();
  return detail::make_result<T>(
      "relu", a.shape(), std::move(out), {&a},
      [an](const std::vector<T>& g) {
        auto& dst = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (an->data[i] > T{0}) dst[i] += g[i];
        }
      });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = T(0.5) * av[i] * (T(1) + std::erf(av[i] * inv_sqrt2));
  }
  detail::count_aux(out.size());
  auto an = a.node();
  return detail::make_result<T>(
      "gelu", a.shape(), std::move(out), {&a},
      [an, inv_sqrt2](const std::vector<T>& g) {
        auto& dst = an->grad_buffer();
        const T inv_sqrt2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T x = an->data[i];
          const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
          const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
          dst[i] += g[i] * (cdf + x * pdf);
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " +
                     to_string(shape) + " changes element count");
  }
  auto an = a.node();
  return detail::make_result<T>(
      "reshape", std::move(shape), a.values(), {&a},
      [an](const std::vector<T>& g) {
        auto& dst = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      });
}

/// out.shape[i] = in.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<Index>& perm) {
  const Index r = a.rank();
  if (static_cast<Index>(perm.size()) != r) {
    throw ShapeError("permute: rank mismatch");
  }
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  for (Index p : perm) {
    if (p < 0 || p >= r || used[static_cast<std::size_t>(p)]) {
      throw ShapeError("permute: invalid axis order");
    }
    used[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(r));
  for (Index i = 0; i < r; ++i) out_shape[i] = a.dim(perm[i]);
  const auto in_strides = detail::strides_of(a.shape());
  // source offset for each output element, walking the output in order
  std::vector<Index> gather(static_cast<std::size_t>(a.numel()));
  {
    std::vector<Index> idx(static_cast<std::size_t>(r), 0);
    for (Index o = 0; o < a.numel(); ++o) {
      Index src = 0;
      for (Index i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
      gather[static_cast<std::size_t>(o)] = src;
      for (Index i = r - 1; i >= 0; --i) {
        if (++idx[i] < out_shape[i]) break;
        idx[i] = 0;
      }
    }
  }
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = av[gather[o]];
  auto an = a.node();
  return detail::make_result<T>(
      "permute", std::move(out_shape), std::move(out), {&a},
      [an, gather = std::move(gather)](const std::vector<T>& g) {
        auto& dst = an->grad_buffer();
        for (std::size_t o = 0; o < g.size(); ++o) dst[gather[o]] += g[o];
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a matrix");
  return permute(a, {1, 0});
}

/// Concatenation along axis 0 (the channel axis for C x H x W x D volumes).
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape shape = parts.front().shape();
  Index channels = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<Index>(shape.size()) ||
        !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat: trailing extents differ, " +
                       to_string(parts.front().shape()) + " vs " +
                       to_string(p.shape()));
    }
    channels += p.dim(0);
  }
  shape[0] = channels;
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(numel(shape)));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());

  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(out);
  node->op = "concat";
  bool needs = false;
  if (detail::grad_mode()) {
    for (const auto& p : parts) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    std::vector<NodePtr<T>> ins;
    for (const auto& p : parts) {
      node->inputs.push_back(p.node());
      ins.push_back(p.node());
    }
    node->backward = [ins](const std::vector<T>& g) {
      std::size_t offset = 0;
      for (const auto& n : ins) {
        const std::size_t len = n->data.size();
        if (n->requires_grad) {
          auto& dst = n->grad_buffer();
          for (std::size_t i = 0; i < len; ++i) dst[i] += g[offset + i];
        }
        offset += len;
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{0};
  for (T v : a.values()) total += v;
  auto an = a.node();
  return detail::make_result<T>(
      "sum", {1}, {total}, {&a}, [an](const std::vector<T>& g) {
        auto& dst = an->grad_buffer();
        for (auto& d : dst) d += g[0];
      });
}

/// sum_i a_i * w_i with constant weights.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& a, std::vector<T> weights) {
  if (static_cast<Index>(weights.size()) != a.numel()) {
    throw ShapeError("weighted_sum: weight count mismatch");
  }
  T total{0};
  for (std::size_t i = 0; i < weights.size(); ++i) total += a.values()[i] * weights[i];
  auto an = a.node();
  return detail::make_result<T>(
      "weighted_sum", {1}, {total}, {&a},
      [an, w = std::move(weights)](const std::vector<T>& g) {
        auto& dst = an->grad_buffer();
        for (std::size_t i = 0; i < w.size(); ++i) dst[i] += g[0] * w[i];
      });
}

/// x: (... x n) plus bias (n) broadcast over the leading rows.
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const Index n = x.dim(x.rank() - 1);
  if (bias.numel() != n) {
    throw ShapeError("row bias of size " + std::to_string(bias.numel()) +
                     " for last extent " + std::to_string(n));
  }
  std::vector<T> out(x.values());
  const auto& b = bias.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
  auto xn = x.node(), bn = bias.node();
  return detail::make_result<T>(
      "add_row_bias", x.shape(), std::move(out), {&x, &bias},
      [xn, bn, n](const std::vector<T>& g) {
        if (xn->requires_grad) {
          auto& dst = xn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
        if (bn->requires_grad) {
          auto& dst = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i % n] += g[i];
        }
      });
}

/// x: (C x ...) plus bias[c] on every element of channel c.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const Index c = x.dim(0);
  if (bias.numel() != c) {
    throw ShapeError("channel bias of size " + std::to_string(bias.numel()) + " for " +
                     std::to_string(c) + " channels");
  }
  const Index inner = x.numel() / c;
  std::vector<T> out(x.values());
  for (Index ch = 0; ch < c; ++ch) {
    for (Index i = 0; i < inner; ++i) out[ch * inner + i] += bias.values()[ch];
  }
  auto xn = x.node(), bn = bias.node();
  return detail::make_result<T>(
      "add_channel_bias", x.shape(), std::move(out), {&x, &bias},
      [xn, bn, c, inner](const std::vector<T>& g) {
        if (xn->requires_grad) {
          auto& dst = xn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
        if (bn->requires_grad) {
          auto& dst = bn->grad_buffer();
          for (Index ch = 0; ch < c; ++ch) {
            T acc{0};
            for (Index i = 0; i < inner; ++i) acc += g[ch * inner + i];
            dst[ch] += acc;
          }
        }
      });
}

/// x: (C x ...) -> gamma[c] * x + beta[c].
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& gamma,
                         const Tensor<T>& beta) {
  const Index c = x.dim(0);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("channel affine parameters do not match " +
                     std::to_string(c) + " channels");
  }
  const Index inner = x.numel() / c;
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (Index ch = 0; ch < c; ++ch) {
    const T gm = gamma.values()[ch], bt = beta.values()[ch];
    for (Index i = 0; i < inner; ++i) {
      out[ch * inner + i] = gm * xv[ch * inner + i] + bt;
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(
      "channel_affine", x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, c, inner](const std::vector<T>& g) {
        if (xn->requires_grad) {
          auto& dst = xn->grad_buffer();
          for (Index ch = 0; ch < c; ++ch) {
            const T gm = gn->data[ch];
            for (Index i = 0; i < inner; ++i) dst[ch * inner + i] += g[ch * inner + i] * gm;
          }
        }
        if (gn->requires_grad) {
          auto& dst = gn->grad_buffer();
          for (Index ch = 0; ch < c; ++ch) {
            T acc{0};
            for (Index i = 0; i < inner; ++i) acc += g[ch * inner + i] * xn->data[ch * inner + i];
            dst[ch] += acc;
          }
        }
        if (bn->requires_grad) {
          auto& dst = bn->grad_buffer();
          for (Index ch = 0; ch < c; ++ch) {
            T acc{0};
            for (Index i = 0; i < inner; ++i) acc += g[ch * inner + i];
            dst[ch] += acc;
          }
        }
      });
}

/// Inverted dropout. Identity unless `training` and p > 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.values().size());
  for (auto& m : mask) m = rng.uniform() < p ? T{0} : keep_scale;
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  auto xn = x.node();
  return detail::make_result<T>(
      "dropout", x.shape(), std::move(out), {&x},
      [xn, mask = std::move(mask)](const std::vector<T>& g) {
        auto& dst = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * mask[i];
      });
}

}  // namespace volseg
