#pragma once

#include <numeric>
#include <string>

#include "volseg/complexity/report.hpp"
#include "volseg/core/conv.hpp"
#include "volseg/core/linalg.hpp"
#include "volseg/core/ops.hpp"
#include "volseg/nn/params.hpp"

namespace volseg {

inline Index norm_groups(Index channels) { return std::gcd(channels, Index{8}); }

inline void account_activation(const std::string& name, const Shape& shape, Accountant& acc) {
  acc.add(name, "relu", 0, 0, static_cast<std::uint64_t>(numel(shape)), shape);
}

template <typename T>
class Conv3dLayer {
 public:
  Conv3dLayer() = default;
  Conv3dLayer(ParamStore<T>& store, const std::string& name, Index c_in, Index c_out,
              ConvSpec spec, bool bias = true, bool zero_init = false)
      : name_(name), c_in_(c_in), c_out_(c_out), spec_(spec) {
    if (c_in % spec.groups != 0 || c_out % spec.groups != 0) {
      throw ConfigError(name + ": groups must divide channel counts");
    }
    const Index fan_in = (c_in / spec.groups) * spec.taps();
    weight_ = store.add(name + ".weight",
                        {c_out, c_in / spec.groups, spec.kernel[0], spec.kernel[1], spec.kernel[2]},
                        zero_init ? Init::zeros() : Init::kaiming(fan_in));
    if (bias) bias_ = store.add(name + ".bias", {c_out}, Init::zeros());
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv3d(x, weight_, bias_, spec_); }

  Shape account(const Shape& in, Accountant& acc) const {
    if (in.size() != 4 || in[0] != c_in_) {
      throw ShapeError(name_ + ": expects " + std::to_string(c_in_) + " channels, got " +
                       to_string(in));
    }
    const Triple o = conv_output_extent({in[1], in[2], in[3]}, spec_);
    Shape out{c_out_, o[0], o[1], o[2]};
    const std::uint64_t params = static_cast<std::uint64_t>(
        weight_.numel() + (bias_.defined() ? bias_.numel() : 0));
    acc.add(name_, "conv3d", params, conv_macs(out, c_in_, spec_.groups, spec_.taps()), 0, out);
    return out;
  }

  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  const ConvSpec& spec() const { return spec_; }
  Index out_channels() const { return c_out_; }

 private:
  std::string name_;
  Index c_in_ = 0, c_out_ = 0;
  ConvSpec spec_;
  Tensor<T> weight_, bias_;
};

template <typename T>
class GroupNormLayer {
 public:
  GroupNormLayer() = default;
  GroupNormLayer(ParamStore<T>& store, const std::string& name, Index channels)
      : name_(name), channels_(channels), groups_(norm_groups(channels)) {
    gamma_ = store.add(name + ".weight", {channels}, Init::ones());
    beta_ = store.add(name + ".bias", {channels}, Init::zeros());
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, groups_, gamma_, beta_); }

  Shape account(const Shape& in, Accountant& acc) const {
    acc.add(name_, "group_norm", static_cast<std::uint64_t>(2 * channels_), 0,
            static_cast<std::uint64_t>(numel(in)), in);
    return in;
  }

 private:
  std::string name_;
  Index channels_ = 0, groups_ = 1;
  Tensor<T> gamma_, beta_;
};

template <typename T>
class LayerNormLayer {
 public:
  LayerNormLayer() = default;
  LayerNormLayer(ParamStore<T>& store, const std::string& name, Index dim)
      : name_(name), dim_(dim) {
    gamma_ = store.add(name + ".weight", {dim}, Init::ones());
    beta_ = store.add(name + ".bias", {dim}, Init::zeros());
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma_, beta_); }

  Shape account(const Shape& in, Accountant& acc) const {
    acc.add(name_, "layer_norm", static_cast<std::uint64_t>(2 * dim_), 0,
            static_cast<std::uint64_t>(numel(in)), in);
    return in;
  }

 private:
  std::string name_;
  Index dim_ = 0;
  Tensor<T> gamma_, beta_;
};

/// Token-wise linear map x (N x d_in) -> x W (+ b), W stored d_in x d_out.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, Index d_in, Index d_out, bool bias)
      : name_(name), d_in_(d_in), d_out_(d_out) {
    weight_ = store.add(name + ".weight", {d_in, d_out}, Init::kaiming(d_in));
    if (bias) bias_ = store.add(name + ".bias", {d_out}, Init::zeros());
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight_);
    return bias_.defined() ? add_row_bias(y, bias_) : y;
  }

  Shape account(const Shape& in, Accountant& acc) const {
    if (in.size() != 2 || in[1] != d_in_) {
      throw ShapeError(name_ + ": expects tokens of width " + std::to_string(d_in_) +
                       ", got " + to_string(in));
    }
    Shape out{in[0], d_out_};
    const std::uint64_t params =
        static_cast<std::uint64_t>(d_in_ * d_out_ + (bias_.defined() ? d_out_ : 0));
    acc.add(name_, "linear", params, static_cast<std::uint64_t>(in[0] * d_in_ * d_out_), 0,
            out);
    return out;
  }

  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  std::string name_;
  Index d_in_ = 0, d_out_ = 0;
  Tensor<T> weight_, bias_;
};

/// Pre-activated residual block: x + conv(relu(gn(conv(relu(gn(x)))))).
template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(ParamStore<T>& store, const std::string& name, Index channels)
      : name_(name),
        norm1_(store, name + ".norm1", channels),
        conv1_(store, name + ".conv1", channels, channels, ConvSpec::same(3)),
        norm2_(store, name + ".norm2", channels),
        conv2_(store, name + ".conv2", channels, channels, ConvSpec::same(3)) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto h = conv1_(relu(norm1_(x)));
    h = conv2_(relu(norm2_(h)));
    return add(x, h);
  }

  Shape account(const Shape& in, Accountant& acc) const {
    Shape s = norm1_.account(in, acc);
    account_activation(name_ + ".act1", s, acc);
    s = conv1_.account(s, acc);
    s = norm2_.account(s, acc);
    account_activation(name_ + ".act2", s, acc);
    return conv2_.account(s, acc);
  }

 private:
  std::string name_;
  GroupNormLayer<T> norm1_;
  Conv3dLayer<T> conv1_;
  GroupNormLayer<T> norm2_;
  Conv3dLayer<T> conv2_;
};

}  // namespace volseg
