#pragma once

#include <string>
#include <vector>

#include "volseg/core/interp.hpp"
#include "volseg/nn/layers.hpp"

namespace volseg {

/// Deformable S^3 convolution, stride 1, padding (S-1)/2. Offsets are
/// 3S^3 x h x w x d' with channel 3*tap + axis holding the (h, w, d)
/// displacement of kernel tap `tap` (taps ordered kh, kw, kd) at each
/// output voxel. Weight layout matches conv3d: C_out x C x S x S x S.
template <typename T>
Tensor<T> deformable_conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                            const Tensor<T>& offsets, Index kernel) {
  if (x.rank() != 4) throw ShapeError("deformable_conv3d input must be C x H x W x D");
  const Index c = x.dim(0), taps = kernel * kernel * kernel;
  const Triple ext{x.dim(1), x.dim(2), x.dim(3)};
  const Index vox = ext[0] * ext[1] * ext[2];
  if (offsets.rank() != 4 || offsets.dim(0) != 3 * taps) {
    throw ConfigError("deformable conv with kernel " + std::to_string(kernel) + " needs " +
                      std::to_string(3 * taps) + " offset channels, got " +
                      to_string(offsets.shape()));
  }
  if (offsets.dim(1) != ext[0] || offsets.dim(2) != ext[1] || offsets.dim(3) != ext[2]) {
    throw ShapeError("offset grid " + to_string(offsets.shape()) +
                     " must match the output grid " + to_string(x.shape()));
  }
  if (weight.rank() != 5 || weight.dim(1) != c || weight.dim(2) != kernel ||
      weight.dim(3) != kernel || weight.dim(4) != kernel) {
    throw ShapeError("deformable conv weight " + to_string(weight.shape()) +
                     " does not fit input " + to_string(x.shape()));
  }
  const Index c_out = weight.dim(0);
  const Index pad = (kernel - 1) / 2;

  // regular sampling grid p0 + pn, rows ordered (tap, voxel)
  std::vector<T> base(static_cast<std::size_t>(taps * vox * 3));
  Index tap = 0;
  for (Index kh = 0; kh < kernel; ++kh)
    for (Index kw = 0; kw < kernel; ++kw)
      for (Index kd = 0; kd < kernel; ++kd, ++tap) {
        Index v = 0;
        for (Index oh = 0; oh < ext[0]; ++oh)
          for (Index ow = 0; ow < ext[1]; ++ow)
            for (Index od = 0; od < ext[2]; ++od, ++v) {
              T* p = base.data() + (tap * vox + v) * 3;
              p[0] = T(oh + kh - pad);
              p[1] = T(ow + kw - pad);
              p[2] = T(od + kd - pad);
            }
      }
  auto grid = Tensor<T>::from({taps * vox, 3}, std::move(base));
  auto delta = reshape(permute(reshape(offsets, {taps, 3, vox}), {0, 2, 1}), {taps * vox, 3});
  auto samples = reshape(grid_sample_trilinear(x, add(grid, delta)), {c * taps, vox});
  auto y = matmul(reshape(weight, {c_out, c * taps}), samples);
  if (bias.defined()) y = add_channel_bias(y, bias);
  return reshape(y, {c_out, ext[0], ext[1], ext[2]});
}

struct DbmConfig {
  Index channels = 16;
  Index reduction = 4;
  Index kernel = 3;

  Index reduced() const { return channels / reduction; }
  Index offset_channels() const { return 3 * kernel * kernel * kernel; }

  void validate() const {
    if (reduction < 1 || channels % reduction != 0) {
      throw ConfigError("DBM: reduction " + std::to_string(reduction) +
                        " does not divide " + std::to_string(channels) + " channels");
    }
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("DBM: deform kernel must be odd");
  }
};

/// Deformable bottleneck on a skip connection:
/// out = x + restore(deform(reduce(x), offsets(reduce(x)))).
template <typename T>
class Dbm {
 public:
  Dbm() = default;
  Dbm(ParamStore<T>& store, const std::string& name, const DbmConfig& cfg)
      : name_(name), cfg_(cfg) {
    cfg.validate();
    const Index m = cfg.reduced();
    reduce_ = Conv3dLayer<T>(store, name + ".reduce", cfg.channels, m, ConvSpec::same(3));
    reduce_norm_ = GroupNormLayer<T>(store, name + ".reduce_norm", m);
    offset_ = Conv3dLayer<T>(store, name + ".offset", m, cfg.offset_channels(),
                             ConvSpec::same(3), true, true);
    deform_ = Conv3dLayer<T>(store, name + ".deform", m, m, ConvSpec::same(cfg.kernel));
    deform_norm_ = GroupNormLayer<T>(store, name + ".deform_norm", m);
    restore_ = Conv3dLayer<T>(store, name + ".restore", m, cfg.channels, ConvSpec::same(3));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(0) != cfg_.channels) {
      throw ShapeError(name_ + ": expects " + std::to_string(cfg_.channels) +
                       " channels, got " + to_string(x.shape()));
    }
    auto r = relu(reduce_norm_(reduce_(x)));
    auto off = offset_(r);
    auto d = deformable_conv3d(r, deform_.weight(), deform_.bias(), off, cfg_.kernel);
    d = relu(deform_norm_(d));
    return add(x, restore_(d));
  }

  Shape account(const Shape& in, Accountant& acc) const {
    Shape s = reduce_norm_.account(reduce_.account(in, acc), acc);
    account_activation(name_ + ".reduce_act", s, acc);
    offset_.account(s, acc);
    // same MACs as the regular conv plus one resampled value per tap
    const Shape sampled{cfg_.reduced() * cfg_.kernel * cfg_.kernel * cfg_.kernel,
                        s[1] * s[2] * s[3]};
    acc.add(name_ + ".sample", "grid_sample", 0, 0, static_cast<std::uint64_t>(numel(sampled)),
            sampled);
    s = deform_norm_.account(deform_.account(s, acc), acc);
    account_activation(name_ + ".deform_act", s, acc);
    return restore_.account(s, acc);
  }

  const DbmConfig& config() const { return cfg_; }
  const Conv3dLayer<T>& offset_conv() const { return offset_; }

 private:
  std::string name_;
  DbmConfig cfg_;
  Conv3dLayer<T> reduce_, offset_, deform_, restore_;
  GroupNormLayer<T> reduce_norm_, deform_norm_;
};

}  // namespace volseg
