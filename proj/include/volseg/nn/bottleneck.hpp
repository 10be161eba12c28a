#pragma once

#include <string>
#include <vector>

#include "volseg/nn/attention.hpp"

namespace volseg {

/// z0 = flatten(expand(F)) + PE. Without the expansion conv the tokens keep
/// the K encoder channels. The expansion conv is accounted to the encoder.
template <typename T>
class FeatureEmbed {
 public:
  FeatureEmbed() = default;
  FeatureEmbed(ParamStore<T>& store, const std::string& expand_name,
               const std::string& position_name, Index channels, Index dim, const Triple& grid,
               bool expand)
      : name_(position_name), channels_(channels), dim_(expand ? dim : channels), grid_(grid) {
    if (expand) {
      expand_ = Conv3dLayer<T>(store, expand_name, channels, dim, ConvSpec::same(3));
    }
    pe_ = store.add(position_name, {tokens(), dim_}, Init::normal(0.02));
  }

  Index tokens() const { return grid_[0] * grid_[1] * grid_[2]; }
  Index dim() const { return dim_; }

  Tensor<T> operator()(const Tensor<T>& features) const {
    check(features.shape());
    auto f = expanded() ? expand_(features) : features;
    return add(tokens_from_volume(f), pe_);
  }

  Shape account(const Shape& in, Accountant& acc) const {
    check(in);
    if (expanded()) {
      const std::string section = acc.section();
      acc.set_section("encoder");
      expand_.account(in, acc);
      acc.set_section(section);
    }
    Shape out{tokens(), dim_};
    acc.add(name_, "position", static_cast<std::uint64_t>(tokens() * dim_), 0, 0,
            out);
    return out;
  }

  const Tensor<T>& position() const { return pe_; }

 private:
  bool expanded() const { return expand_.weight().defined(); }

  void check(const Shape& in) const {
    if (in.size() != 4 || in[0] != channels_) {
      throw ShapeError(name_ + ": expects " + std::to_string(channels_) +
                       "-channel features, got " + to_string(in));
    }
    if (in[1] != grid_[0] || in[2] != grid_[1] || in[3] != grid_[2]) {
      throw ConfigError(name_ + ": feature grid " + to_string(in) +
                        " does not match the position-encoding grid " +
                        to_string(Shape(grid_.begin(), grid_.end())));
    }
  }

  std::string name_;
  Index channels_ = 0, dim_ = 0;
  Triple grid_{};
  Conv3dLayer<T> expand_;
  Tensor<T> pe_;
};

/// Tokens back to a K-channel volume: reshape, then (when widened) two
/// 3x3x3 conv -> GN -> ReLU stages d -> K_mid -> K.
template <typename T>
class FeatureRestore {
 public:
  FeatureRestore() = default;
  FeatureRestore(ParamStore<T>& store, const std::string& name, Index dim, Index mid,
                 Index channels, const Triple& grid, bool convs)
      : name_(name), dim_(dim), grid_(grid) {
    if (convs) {
      conv1_ = Conv3dLayer<T>(store, name + ".conv1", dim, mid, ConvSpec::same(3));
      norm1_ = GroupNormLayer<T>(store, name + ".norm1", mid);
      conv2_ = Conv3dLayer<T>(store, name + ".conv2", mid, channels, ConvSpec::same(3));
      norm2_ = GroupNormLayer<T>(store, name + ".norm2", channels);
    } else if (dim != channels) {
      throw ConfigError(name + ": without restore convs the embed dim must equal K");
    }
  }

  Tensor<T> operator()(const Tensor<T>& tokens) const {
    check(tokens.shape());
    auto v = volume_from_tokens(tokens, grid_);
    if (!convs()) return v;
    v = relu(norm1_(conv1_(v)));
    return relu(norm2_(conv2_(v)));
  }

  Shape account(const Shape& in, Accountant& acc) const {
    check(in);
    Shape s{dim_, grid_[0], grid_[1], grid_[2]};
    if (!convs()) return s;
    s = norm1_.account(conv1_.account(s, acc), acc);
    account_activation(name_ + ".act1", s, acc);
    s = norm2_.account(conv2_.account(s, acc), acc);
    account_activation(name_ + ".act2", s, acc);
    return s;
  }

 private:
  bool convs() const { return conv1_.weight().defined(); }

  void check(const Shape& in) const {
    if (in.size() != 2 || in[1] != dim_) {
      throw ShapeError(name_ + ": expects N x " + std::to_string(dim_) + " tokens, got " +
                       to_string(in));
    }
    if (in[0] != grid_[0] * grid_[1] * grid_[2]) {
      throw ConfigError(name_ + ": " + std::to_string(in[0]) +
                        " tokens do not match the h*w*d' grid");
    }
  }

  std::string name_;
  Index dim_ = 0;
  Triple grid_{};
  Conv3dLayer<T> conv1_, conv2_;
  GroupNormLayer<T> norm1_, norm2_;
};

/// Embed -> L transformer blocks -> restore. Parameter names: the expansion
/// conv lives under "encoder.expand", the restore convs under
/// "decoder.restore", position encoding and blocks under "transformer".
template <typename T>
class TransformerBottleneck {
 public:
  TransformerBottleneck() = default;
  TransformerBottleneck(ParamStore<T>& store, Index channels, const AttentionConfig& attn,
                        Index depth, Index ffn_hidden, Index restore_mid, const Triple& grid,
                        bool expand)
      : embed_(store, "encoder.expand", "transformer.position", channels, attn.dim, grid,
               expand) {
    const std::string name = "transformer";
    AttentionConfig cfg = attn;
    if (!expand && cfg.dim != channels) {
      throw ConfigError("without feature expansion the transformer width must equal K");
    }
    for (Index l = 0; l < depth; ++l) {
      blocks_.emplace_back(store, name + ".block" + std::to_string(l + 1), cfg, grid,
                           ffn_hidden);
    }
    restore_ = FeatureRestore<T>(store, "decoder.restore", cfg.dim, restore_mid, channels,
                                 grid, expand);
  }

  Tensor<T> operator()(const Tensor<T>& features, AttentionProbe<T>* probe = nullptr) const {
    auto z = embed_(features);
    for (const auto& b : blocks_) z = b(z, probe);
    return restore_(z);
  }

  Shape account(const Shape& in, Accountant& acc) const {
    Shape s = embed_.account(in, acc);
    for (const auto& b : blocks_) s = b.account(s, acc);
    const std::string section = acc.section();
    acc.set_section("decoder");
    s = restore_.account(s, acc);
    acc.set_section(section);
    return s;
  }

  const FeatureEmbed<T>& embed() const { return embed_; }
  const std::vector<TransformerBlock<T>>& blocks() const { return blocks_; }
  const FeatureRestore<T>& restore() const { return restore_; }

 private:
  FeatureEmbed<T> embed_;
  std::vector<TransformerBlock<T>> blocks_;
  FeatureRestore<T> restore_;
};

}  // namespace volseg
