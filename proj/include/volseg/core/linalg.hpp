#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "volseg/core/ops.hpp"
#include "volseg/core/tensor.hpp"

namespace volseg {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace detail

/// (m x k) . (k x n)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul " + to_string(a.shape()) + " . " +
                     to_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::MapMat<T>(out.data(), m, n).noalias() =
      detail::CMapMat<T>(a.values().data(), m, k) *
      detail::CMapMat<T>(b.values().data(), k, n);
  detail::count_macs(static_cast<std::uint64_t>(m * n * k));
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      "matmul", {m, n}, std::move(out), {&a, &b},
      [an, bn, m, k, n](const std::vector<T>& g) {
        detail::CMapMat<T> G(g.data(), m, n);
        if (an->requires_grad) {
          detail::MapMat<T>(an->grad_buffer().data(), m, k).noalias() +=
              G * detail::CMapMat<T>(bn->data.data(), k, n).transpose();
        }
        if (bn->requires_grad) {
          detail::MapMat<T>(bn->grad_buffer().data(), k, n).noalias() +=
              detail::CMapMat<T>(an->data.data(), m, k).transpose() * G;
        }
      });
}

/// Batched product: (B x m x k) . (B x k x n), or with `transpose_b`
/// (B x m x k) . (B x n x k)^T.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    throw ShapeError("bmm " + to_string(a.shape()) + " . " +
                     to_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (Index i = 0; i < batch; ++i) {
    detail::MapMat<T> C(out.data() + i * m * n, m, n);
    detail::CMapMat<T> A(av + i * m * k, m, k);
    if (transpose_b) {
      C.noalias() = A * detail::CMapMat<T>(bv + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * detail::CMapMat<T>(bv + i * k * n, k, n);
    }
  }
  detail::count_macs(static_cast<std::uint64_t>(batch * m * n * k));
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      "bmm", {batch, m, n}, std::move(out), {&a, &b},
      [an, bn, batch, m, k, n, transpose_b](const std::vector<T>& g) {
        for (Index i = 0; i < batch; ++i) {
          detail::CMapMat<T> G(g.data() + i * m * n, m, n);
          if (an->requires_grad) {
            detail::MapMat<T> dA(an->grad_buffer().data() + i * m * k, m, k);
            if (transpose_b) {
              dA.noalias() += G * detail::CMapMat<T>(bn->data.data() + i * n * k, n, k);
            } else {
              dA.noalias() +=
                  G * detail::CMapMat<T>(bn->data.data() + i * k * n, k, n).transpose();
            }
          }
          if (bn->requires_grad) {
            detail::CMapMat<T> A(an->data.data() + i * m * k, m, k);
            if (transpose_b) {
              detail::MapMat<T>(bn->grad_buffer().data() + i * n * k, n, k).noalias() +=
                  G.transpose() * A;
            } else {
              detail::MapMat<T>(bn->grad_buffer().data() + i * k * n, k, n).noalias() +=
                  A.transpose() * G;
            }
          }
        }
      });
}

/// Max-subtracted softmax over the last axis.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const Index n = x.dim(x.rank() - 1);
  const Index rows = x.numel() / n;
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (Index r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T* o = out.data() + r * n;
    const T peak = *std::max_element(in, in + n);
    T total{0};
    for (Index j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - peak));
    for (Index j = 0; j < n; ++j) o[j] /= total;
  }
  detail::count_aux(out.size());
  auto xn = x.node();
  auto result = detail::make_result<T>("softmax", x.shape(), std::move(out), {&x},
                                       [](const std::vector<T>&) {});
  if (result.requires_grad()) {
    // the backward needs the output values; hold them weakly to avoid a cycle
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward = [xn, self, rows, n](const std::vector<T>& g) {
      auto y = self.lock();
      auto& dst = xn->grad_buffer();
      for (Index r = 0; r < rows; ++r) {
        const T* yr = y->data.data() + r * n;
        const T* gr = g.data() + r * n;
        T dot{0};
        for (Index j = 0; j < n; ++j) dot += yr[j] * gr[j];
        for (Index j = 0; j < n; ++j) dst[r * n + j] += yr[j] * (gr[j] - dot);
      }
    };
  }
  return result;
}

/// Zero-mean unit-variance over the last axis, no affine.
template <typename T>
Tensor<T> normalize_lastdim(const Tensor<T>& x, T eps = T(1e-5)) {
  const Index n = x.dim(x.rank() - 1);
  const Index rows = x.numel() / n;
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T mean{0};
    for (Index j = 0; j < n; ++j) mean += in[j];
    mean /= T(n);
    T var{0};
    for (Index j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (Index j = 0; j < n; ++j) out[r * n + j] = (in[j] - mean) * is;
  }
  detail::count_aux(out.size());
  auto xn = x.node();
  auto result = detail::make_result<T>("normalize", x.shape(), std::move(out), {&x},
                                       [](const std::vector<T>&) {});
  if (result.requires_grad()) {
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward = [xn, self, rows, n,
                               inv_std = std::move(inv_std)](const std::vector<T>& g) {
      auto y = self.lock();
      auto& dst = xn->grad_buffer();
      for (Index r = 0; r < rows; ++r) {
        const T* yr = y->data.data() + r * n;
        const T* gr = g.data() + r * n;
        T gmean{0}, gy{0};
        for (Index j = 0; j < n; ++j) {
          gmean += gr[j];
          gy += gr[j] * yr[j];
        }
        gmean /= T(n);
        gy /= T(n);
        for (Index j = 0; j < n; ++j) {
          dst[r * n + j] += inv_std[r] * (gr[j] - gmean - yr[j] * gy);
        }
      }
    };
  }
  return result;
}

/// x (... x d) * gamma (d) + beta (d).
template <typename T>
Tensor<T> row_affine(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta) {
  const Index n = x.dim(x.rank() - 1);
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("row affine parameters do not match last extent " +
                     std::to_string(n));
  }
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xv[i] * gamma.values()[i % n] + beta.values()[i % n];
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(
      "row_affine", x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, n](const std::vector<T>& g) {
        if (xn->requires_grad) {
          auto& dst = xn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * gn->data[i % n];
        }
        if (gn->requires_grad) {
          auto& dst = gn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i % n] += g[i] * xn->data[i];
        }
        if (bn->requires_grad) {
          auto& dst = bn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i % n] += g[i];
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  return row_affine(normalize_lastdim(x, eps), gamma, beta);
}

/// Group normalisation of a C x ... volume with per-channel affine.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, Index groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  const Index c = x.dim(0);
  if (groups <= 0 || c % groups != 0) {
    throw ShapeError("group norm: " + std::to_string(groups) +
                     " groups do not divide " + std::to_string(c) + " channels");
  }
  auto grouped = reshape(x, {groups, x.numel() / groups});
  auto normed = reshape(normalize_lastdim(grouped, eps), x.shape());
  return channel_affine(normed, gamma, beta);
}

}  // namespace volseg
