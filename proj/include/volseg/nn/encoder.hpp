#pragma once

#include <string>
#include <vector>

#include "volseg/nn/layers.hpp"

namespace volseg {

template <typename T>
struct EncoderOutput {
  Tensor<T> features;           // K x H/8 x W/8 x D/8
  std::vector<Tensor<T>> skips;  // OS 1, 2, 4
};

/// Stem conv, then one level per entry of `channels`: level 0 keeps full
/// resolution, every later level opens with a stride-2 conv. Each level ends
/// with `blocks[i]` pre-activated residual blocks.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamStore<T>& store, const std::string& name, Index in_channels,
          const std::vector<Index>& channels, const std::vector<Index>& blocks)
      : name_(name), in_channels_(in_channels), channels_(channels) {
    if (channels.size() < 2 || channels.size() != blocks.size()) {
      throw ConfigError("encoder needs matching channel and block lists (>= 2 levels)");
    }
    stem_ = Conv3dLayer<T>(store, name + ".stem", in_channels, channels[0], ConvSpec::same(3));
    levels_.resize(channels.size());
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const std::string lvl = name + ".level" + std::to_string(i);
      if (i > 0) {
        levels_[i].down = Conv3dLayer<T>(store, lvl + ".down", channels[i - 1], channels[i],
                                         ConvSpec::cube(3, 2, 1));
      }
      for (Index b = 0; b < blocks[i]; ++b) {
        levels_[i].res.emplace_back(store, lvl + ".res" + std::to_string(b + 1), channels[i]);
      }
    }
  }

  Index stride() const { return Index{1} << (channels_.size() - 1); }

  void check_input(const Shape& in) const {
    if (in.size() != 4) throw ShapeError("encoder input must be C x H x W x D");
    if (in[0] != in_channels_) {
      throw ShapeError("encoder expects " + std::to_string(in_channels_) +
                       " input channels, got " + std::to_string(in[0]));
    }
    for (int a = 1; a <= 3; ++a) {
      if (in[a] % stride() != 0) {
        throw ConfigError("spatial extent " + std::to_string(in[a]) +
                          " is not divisible by the overall stride " +
                          std::to_string(stride()));
      }
    }
  }

  EncoderOutput<T> operator()(const Tensor<T>& x) const {
    check_input(x.shape());
    EncoderOutput<T> out;
    Tensor<T> h = stem_(x);
    for (std::size_t i = 0; i < levels_.size(); ++i) {
      if (i > 0) h = levels_[i].down(h);
      for (const auto& r : levels_[i].res) h = r(h);
      if (i + 1 < levels_.size()) out.skips.push_back(h);
    }
    out.features = h;
    return out;
  }

  /// Returns the feature shape; skip shapes are appended to `skips`.
  Shape account(const Shape& in, Accountant& acc, std::vector<Shape>* skips = nullptr) const {
    check_input(in);
    Shape s = stem_.account(in, acc);
    for (std::size_t i = 0; i < levels_.size(); ++i) {
      if (i > 0) s = levels_[i].down.account(s, acc);
      for (const auto& r : levels_[i].res) s = r.account(s, acc);
      if (skips && i + 1 < levels_.size()) skips->push_back(s);
    }
    return s;
  }

  const std::vector<Index>& channels() const { return channels_; }

 private:
  struct Level {
    Conv3dLayer<T> down;
    std::vector<ResBlock<T>> res;
  };
  std::string name_;
  Index in_channels_ = 0;
  std::vector<Index> channels_;
  Conv3dLayer<T> stem_;
  std::vector<Level> levels_;
};

}  // namespace volseg
