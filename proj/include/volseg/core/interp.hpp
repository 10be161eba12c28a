#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "volseg/core/tensor.hpp"

namespace volseg {

namespace detail {

struct AxisTaps {
  std::vector<Index> lo, hi;
  std::vector<double> frac;  // weight of `hi`
};

// align_corners=false source coordinates for an exact x2 upsample
inline AxisTaps upsample_taps(Index n) {
  AxisTaps t;
  for (Index o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    const Index i0 = static_cast<Index>(std::floor(src));
    t.lo.push_back(i0);
    t.hi.push_back(std::min(i0 + 1, n - 1));
    t.frac.push_back(src - static_cast<double>(i0));
  }
  return t;
}

}  // namespace detail

/// x2 trilinear upsampling of a C x H x W x D volume (align_corners=false).
template <typename T>
Tensor<T> trilinear_upsample(const Tensor<T>& input, Index factor = 2) {
  if (factor != 2) throw InvalidSpec("trilinear_upsample supports factor 2 only");
  if (input.rank() != 4) {
    throw ShapeError("trilinear_upsample expects C x H x W x D, got " +
                     to_string(input.shape()));
  }
  const Index c = input.dim(0), h = input.dim(1), w = input.dim(2), d = input.dim(3);
  const auto th = detail::upsample_taps(h), tw = detail::upsample_taps(w),
             td = detail::upsample_taps(d);
  const Index H = 2 * h, W = 2 * w, D = 2 * d;
  const Index in_vox = h * w * d, out_vox = H * W * D;

  // visits the 8 (input offset, weight) pairs of every output voxel
  auto for_each_tap = [=](auto&& fn) {
    for (Index ch = 0; ch < c; ++ch) {
      for (Index oh = 0; oh < H; ++oh) {
        for (Index ow = 0; ow < W; ++ow) {
          for (Index od = 0; od < D; ++od) {
            const Index o = ch * out_vox + (oh * W + ow) * D + od;
            const std::array<Index, 2> ih{th.lo[oh], th.hi[oh]};
            const std::array<Index, 2> iw{tw.lo[ow], tw.hi[ow]};
            const std::array<Index, 2> id{td.lo[od], td.hi[od]};
            const std::array<T, 2> wh{T(1 - th.frac[oh]), T(th.frac[oh])};
            const std::array<T, 2> ww{T(1 - tw.frac[ow]), T(tw.frac[ow])};
            const std::array<T, 2> wd{T(1 - td.frac[od]), T(td.frac[od])};
            for (int a = 0; a < 2; ++a) {
              for (int b = 0; b < 2; ++b) {
                for (int e = 0; e < 2; ++e) {
                  fn(o, ch * in_vox + (ih[a] * w + iw[b]) * d + id[e], wh[a] * ww[b] * wd[e]);
                }
              }
            }
          }
        }
      }
    }
  };

  std::vector<T> out(static_cast<std::size_t>(c * out_vox), T{0});
  const auto& xv = input.values();
  for_each_tap([&](Index o, Index i, T wt) { out[o] += wt * xv[i]; });
  detail::count_aux(out.size());
  auto xn = input.node();
  return detail::make_result<T>(
      "upsample", {c, H, W, D}, std::move(out), {&input},
      [xn, for_each_tap](const std::vector<T>& g) {
        auto& dst = xn->grad_buffer();
        for_each_tap([&](Index o, Index i, T wt) { dst[i] += wt * g[o]; });
      });
}

/// Samples a C x H x W x D volume at M fractional (h, w, d) locations with
/// trilinear weights; neighbours outside the volume read as zero. Output C x M.
/// Differentiable in both the volume and the locations.
template <typename T>
Tensor<T> grid_sample_trilinear(const Tensor<T>& input, const Tensor<T>& locations) {
  if (input.rank() != 4) {
    throw ShapeError("grid_sample input must be C x H x W x D, got " +
                     to_string(input.shape()));
  }
  if (locations.rank() != 2 || locations.dim(1) != 3) {
    throw ShapeError("grid_sample locations must be M x 3, got " +
                     to_string(locations.shape()));
  }
  const Index c = input.dim(0);
  const Triple ext{input.dim(1), input.dim(2), input.dim(3)};
  const Index m = locations.dim(0);
  const Index vox = ext[0] * ext[1] * ext[2];

  // corner c in [0,8): bit 2 -> h, bit 1 -> w, bit 0 -> d
  auto corners = [ext](const T* p, std::array<Index, 8>& offset,
                       std::array<std::array<T, 2>, 3>& wts, std::array<Index, 3>& base) {
    for (int a = 0; a < 3; ++a) {
      const T fl = std::floor(p[a]);
      base[a] = static_cast<Index>(fl);
      const T f = p[a] - fl;
      wts[a] = {T(1) - f, f};
    }
    for (int k = 0; k < 8; ++k) {
      const Index ih = base[0] + ((k >> 2) & 1), iw = base[1] + ((k >> 1) & 1),
                  id = base[2] + (k & 1);
      const bool inside = ih >= 0 && ih < ext[0] && iw >= 0 && iw < ext[1] && id >= 0 &&
                          id < ext[2];
      offset[k] = inside ? (ih * ext[1] + iw) * ext[2] + id : -1;
    }
  };

  const auto& xv = input.values();
  const auto& lv = locations.values();
  std::vector<T> out(static_cast<std::size_t>(c * m), T{0});
  for (Index j = 0; j < m; ++j) {
    std::array<Index, 8> off;
    std::array<std::array<T, 2>, 3> wts;
    std::array<Index, 3> base;
    corners(lv.data() + 3 * j, off, wts, base);
    for (int k = 0; k < 8; ++k) {
      if (off[k] < 0) continue;
      const T wt = wts[0][(k >> 2) & 1] * wts[1][(k >> 1) & 1] * wts[2][k & 1];
      for (Index ch = 0; ch < c; ++ch) out[ch * m + j] += wt * xv[ch * vox + off[k]];
    }
  }
  detail::count_aux(out.size());
  auto xn = input.node(), ln = locations.node();
  return detail::make_result<T>(
      "grid_sample", {c, m}, std::move(out), {&input, &locations},
      [xn, ln, corners, c, m, vox](const std::vector<T>& g) {
        T* dx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
        T* dl = ln->requires_grad ? ln->grad_buffer().data() : nullptr;
        for (Index j = 0; j < m; ++j) {
          std::array<Index, 8> off;
          std::array<std::array<T, 2>, 3> wts;
          std::array<Index, 3> base;
          corners(ln->data.data() + 3 * j, off, wts, base);
          for (int k = 0; k < 8; ++k) {
            if (off[k] < 0) continue;
            const int bh = (k >> 2) & 1, bw = (k >> 1) & 1, bd = k & 1;
            const T wt = wts[0][bh] * wts[1][bw] * wts[2][bd];
            T gv{0};  // sum_c g[c,j] * x[c, corner]
            for (Index ch = 0; ch < c; ++ch) {
              const T gj = g[ch * m + j];
              if (dx) dx[ch * vox + off[k]] += wt * gj;
              gv += gj * xn->data[ch * vox + off[k]];
            }
            if (dl) {
              const T sh = bh ? T(1) : T(-1), sw = bw ? T(1) : T(-1), sd = bd ? T(1) : T(-1);
              dl[3 * j + 0] += gv * sh * wts[1][bw] * wts[2][bd];
              dl[3 * j + 1] += gv * wts[0][bh] * sw * wts[2][bd];
              dl[3 * j + 2] += gv * wts[0][bh] * wts[1][bw] * sd;
            }
          }
        }
      });
}

}  // namespace volseg
