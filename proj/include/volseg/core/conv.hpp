#pragma once

#include <array>
#include <string>
#include <vector>

#include "volseg/core/linalg.hpp"
#include "volseg/core/parallel.hpp"
#include "volseg/core/tensor.hpp"

namespace volseg {

struct ConvSpec {
  Triple kernel{3, 3, 3};
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  Index groups = 1;

  static ConvSpec cube(Index k, Index stride = 1, Index pad = 0, Index groups = 1) {
    return {{k, k, k}, {stride, stride, stride}, {pad, pad, pad}, groups};
  }
  /// k^3 kernel, stride 1, output extent equal to input extent (odd k).
  static ConvSpec same(Index k, Index groups = 1) {
    return cube(k, 1, (k - 1) / 2, groups);
  }

  Index taps() const { return kernel[0] * kernel[1] * kernel[2]; }
};

/// floor((in + 2p - k)/s) + 1 per axis; InvalidSpec when any is < 1.
inline Triple conv_output_extent(const Triple& in, const ConvSpec& spec) {
  Triple out{};
  for (int a = 0; a < 3; ++a) {
    if (spec.kernel[a] < 1 || spec.stride[a] < 1 || spec.padding[a] < 0) {
      throw InvalidSpec("conv spec has non-positive kernel/stride or negative padding");
    }
    const Index span = in[a] + 2 * spec.padding[a] - spec.kernel[a];
    if (span < 0) {
      throw InvalidSpec("conv output extent is zero on axis " + std::to_string(a) +
                        " (input " + std::to_string(in[a]) + ", kernel " +
                        std::to_string(spec.kernel[a]) + ", padding " +
                        std::to_string(spec.padding[a]) + ")");
    }
    out[a] = span / spec.stride[a] + 1;
  }
  return out;
}

namespace detail {

inline constexpr Index kConvChunk = 2048;  // output voxels per GEMM panel

struct ConvGeometry {
  Index c_in, c_out, groups, cg, cog, taps;
  Triple in, out;
  ConvSpec spec;
  Index in_vox() const { return in[0] * in[1] * in[2]; }
  Index out_vox() const { return out[0] * out[1] * out[2]; }
  Index rows() const { return cg * taps; }
  Index chunks() const { return (out_vox() + kConvChunk - 1) / kConvChunk; }
};

/// cols[(c*taps + tap) * nc + j] = x[group channel c] at the tap offset of
/// output voxel v0 + j (zero when padded).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, Index v0, Index nc, T* cols) {
  const auto& s = g.spec;
  std::vector<Index> bh(nc), bw(nc), bd(nc);
  for (Index j = 0; j < nc; ++j) {
    const Index v = v0 + j;
    const Index od = v % g.out[2];
    const Index ow = (v / g.out[2]) % g.out[1];
    const Index oh = v / (g.out[2] * g.out[1]);
    bh[j] = oh * s.stride[0] - s.padding[0];
    bw[j] = ow * s.stride[1] - s.padding[1];
    bd[j] = od * s.stride[2] - s.padding[2];
  }
  for (Index c = 0; c < g.cg; ++c) {
    const T* xc = x + c * g.in_vox();
    Index tap = 0;
    for (Index kh = 0; kh < s.kernel[0]; ++kh) {
      for (Index kw = 0; kw < s.kernel[1]; ++kw) {
        for (Index kd = 0; kd < s.kernel[2]; ++kd, ++tap) {
          T* row = cols + (c * g.taps + tap) * nc;
          for (Index j = 0; j < nc; ++j) {
            const Index ih = bh[j] + kh, iw = bw[j] + kw, id = bd[j] + kd;
            const bool inside = ih >= 0 && ih < g.in[0] && iw >= 0 && iw < g.in[1] &&
                                id >= 0 && id < g.in[2];
            row[j] = inside ? xc[(ih * g.in[1] + iw) * g.in[2] + id] : T{0};
          }
        }
      }
    }
  }
}

/// Scatter-add inverse of im2col.
template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, Index v0, Index nc, T* dx) {
  const auto& s = g.spec;
  std::vector<Index> bh(nc), bw(nc), bd(nc);
  for (Index j = 0; j < nc; ++j) {
    const Index v = v0 + j;
    const Index od = v % g.out[2];
    const Index ow = (v / g.out[2]) % g.out[1];
    const Index oh = v / (g.out[2] * g.out[1]);
    bh[j] = oh * s.stride[0] - s.padding[0];
    bw[j] = ow * s.stride[1] - s.padding[1];
    bd[j] = od * s.stride[2] - s.padding[2];
  }
  for (Index c = 0; c < g.cg; ++c) {
    T* dc = dx + c * g.in_vox();
    Index tap = 0;
    for (Index kh = 0; kh < s.kernel[0]; ++kh) {
      for (Index kw = 0; kw < s.kernel[1]; ++kw) {
        for (Index kd = 0; kd < s.kernel[2]; ++kd, ++tap) {
          const T* row = cols + (c * g.taps + tap) * nc;
          for (Index j = 0; j < nc; ++j) {
            const Index ih = bh[j] + kh, iw = bw[j] + kw, id = bd[j] + kd;
            if (ih >= 0 && ih < g.in[0] && iw >= 0 && iw < g.in[1] && id >= 0 &&
                id < g.in[2]) {
              dc[(ih * g.in[1] + iw) * g.in[2] + id] += row[j];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 3D cross-correlation. input C_in x H x W x D, weight
/// C_out x (C_in/groups) x kh x kw x kd, bias C_out (or undefined).
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, const ConvSpec& spec) {
  if (input.rank() != 4) {
    throw ShapeError("conv3d input must be C x H x W x D, got " +
                     to_string(input.shape()));
  }
  if (spec.groups < 1) throw InvalidSpec("conv3d groups must be positive");
  const Index c_in = input.dim(0);
  if (weight.rank() != 5) {
    throw ShapeError("conv3d weight must be rank 5, got " + to_string(weight.shape()));
  }
  const Index c_out = weight.dim(0);
  if (c_in % spec.groups != 0 || c_out % spec.groups != 0) {
    throw InvalidSpec("conv3d groups=" + std::to_string(spec.groups) +
                      " must divide in-channels " + std::to_string(c_in) +
                      " and out-channels " + std::to_string(c_out));
  }
  const Shape expected_w{c_out, c_in / spec.groups, spec.kernel[0], spec.kernel[1],
                         spec.kernel[2]};
  if (weight.shape() != expected_w) {
    throw ShapeError("conv3d weight " + to_string(weight.shape()) + " expected " +
                     to_string(expected_w) + " for input " + to_string(input.shape()));
  }
  if (bias.defined() && bias.numel() != c_out) {
    throw ShapeError("conv3d bias has " + std::to_string(bias.numel()) +
                     " entries for " + std::to_string(c_out) + " output channels");
  }
  detail::ConvGeometry geo{c_in,
                           c_out,
                           spec.groups,
                           c_in / spec.groups,
                           c_out / spec.groups,
                           spec.taps(),
                           {input.dim(1), input.dim(2), input.dim(3)},
                           conv_output_extent({input.dim(1), input.dim(2), input.dim(3)}, spec),
                           spec};
  const Index ov = geo.out_vox();
  std::vector<T> out(static_cast<std::size_t>(c_out * ov));
  const T* x = input.values().data();
  const T* w = weight.values().data();
  const Index rows = geo.rows();
  const Index chunks = geo.chunks();

  parallel_for(geo.groups * chunks, [&](Index item) {
    const Index grp = item / chunks;
    const Index v0 = (item % chunks) * detail::kConvChunk;
    const Index nc = std::min(detail::kConvChunk, ov - v0);
    std::vector<T> cols(static_cast<std::size_t>(rows * nc));
    detail::im2col(geo, x + grp * geo.cg * geo.in_vox(), v0, nc, cols.data());
    Eigen::Map<detail::RowMat<T>, 0, Eigen::OuterStride<>> dst(
        out.data() + grp * geo.cog * ov + v0, geo.cog, nc, Eigen::OuterStride<>(ov));
    dst.noalias() = detail::CMapMat<T>(w + grp * geo.cog * rows, geo.cog, rows) *
                    detail::CMapMat<T>(cols.data(), rows, nc);
  });
  if (bias.defined()) {
    const auto& b = bias.values();
    for (Index co = 0; co < c_out; ++co) {
      for (Index v = 0; v < ov; ++v) out[co * ov + v] += b[co];
    }
  }
  detail::count_macs(static_cast<std::uint64_t>(ov * c_out * rows));

  auto xn = input.node(), wn = weight.node();
  NodePtr<T> bn = bias.defined() ? bias.node() : nullptr;
  auto backward = [xn, wn, bn, geo](const std::vector<T>& g) {
    const Index ov = geo.out_vox();
    const Index rows = geo.rows();
    if (bn && bn->requires_grad) {
      auto& db = bn->grad_buffer();
      for (Index co = 0; co < geo.c_out; ++co) {
        T acc{0};
        for (Index v = 0; v < ov; ++v) acc += g[co * ov + v];
        db[co] += acc;
      }
    }
    const bool need_w = wn->requires_grad, need_x = xn->requires_grad;
    if (!need_w && !need_x) return;
    T* dw = need_w ? wn->grad_buffer().data() : nullptr;
    T* dx = need_x ? xn->grad_buffer().data() : nullptr;
    std::vector<T> cols, dcols;
    for (Index grp = 0; grp < geo.groups; ++grp) {
      detail::CMapMat<T> W(wn->data.data() + grp * geo.cog * rows, geo.cog, rows);
      for (Index v0 = 0; v0 < ov; v0 += detail::kConvChunk) {
        const Index nc = std::min(detail::kConvChunk, ov - v0);
        Eigen::Map<const detail::RowMat<T>, 0, Eigen::OuterStride<>> G(
            g.data() + grp * geo.cog * ov + v0, geo.cog, nc, Eigen::OuterStride<>(ov));
        if (need_w) {
          cols.resize(static_cast<std::size_t>(rows * nc));
          detail::im2col(geo, xn->data.data() + grp * geo.cg * geo.in_vox(), v0, nc,
                         cols.data());
          detail::MapMat<T>(dw + grp * geo.cog * rows, geo.cog, rows).noalias() +=
              G * detail::CMapMat<T>(cols.data(), rows, nc).transpose();
        }
        if (need_x) {
          dcols.resize(static_cast<std::size_t>(rows * nc));
          detail::MapMat<T>(dcols.data(), rows, nc).noalias() = W.transpose() * G;
          detail::col2im_add(geo, dcols.data(), v0, nc, dx + grp * geo.cg * geo.in_vox());
        }
      }
    }
  };
  Shape out_shape{c_out, geo.out[0], geo.out[1], geo.out[2]};
  if (bias.defined()) {
    return detail::make_result<T>("conv3d", std::move(out_shape), std::move(out),
                                  {&input, &weight, &bias}, std::move(backward));
  }
  return detail::make_result<T>("conv3d", std::move(out_shape), std::move(out),
                                {&input, &weight}, std::move(backward));
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const ConvSpec& spec) {
  return conv3d(input, weight, Tensor<T>(), spec);
}

/// Channel-wise convolution: weight C x 1 x k^3, spec.groups must equal C.
template <typename T>
Tensor<T> depthwise_conv3d(const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, const ConvSpec& spec) {
  if (input.rank() != 4) {
    throw ShapeError("depthwise_conv3d input must be C x H x W x D");
  }
  if (spec.groups != input.dim(0)) {
    throw InvalidSpec("depthwise_conv3d needs groups == channels (" +
                      std::to_string(input.dim(0)) + "), got " +
                      std::to_string(spec.groups));
  }
  if (weight.rank() != 5 || weight.dim(0) != input.dim(0) || weight.dim(1) != 1) {
    throw ShapeError("depthwise_conv3d weight must be C x 1 x k^3, got " +
                     to_string(weight.shape()));
  }
  return conv3d(input, weight, bias, spec);
}

}  // namespace volseg

namespace volseg {

template <typename T>
Tensor<T> depthwise_conv3d(const Tensor<T>& input, const Tensor<T>& weight,
                           const ConvSpec& spec) {
  return depthwise_conv3d(input, weight, Tensor<T>(), spec);
}

}  // namespace volseg
