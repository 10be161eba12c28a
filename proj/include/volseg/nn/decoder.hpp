#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "volseg/nn/deform.hpp"
#include "volseg/nn/layers.hpp"

namespace volseg {

/// Progressive x2 upsampling from the bottleneck. At each level: upsample,
/// concatenate the (DBM-refined) skip, 1x1x1 fuse to the skip width, one
/// pre-activated residual block. Ends with GN -> ReLU -> 1x1x1 classifier.
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamStore<T>& store, const std::string& name, const std::vector<Index>& channels,
          Index num_classes, std::optional<DbmConfig> dbm, const std::string& dbm_name = "dbm")
      : name_(name), channels_(channels) {
    const std::size_t levels = channels.size() - 1;
    levels_.resize(levels);
    for (std::size_t i = levels; i-- > 0;) {
      const std::string lvl = name + ".level" + std::to_string(i);
      if (dbm) {
        DbmConfig cfg = *dbm;
        cfg.channels = channels[i];
        levels_[i].dbm.emplace(store, dbm_name + ".skip" + std::to_string(i), cfg);
      }
      levels_[i].fuse = Conv3dLayer<T>(store, lvl + ".fuse", channels[i + 1] + channels[i],
                                       channels[i], ConvSpec::cube(1));
      levels_[i].res = ResBlock<T>(store, lvl + ".res", channels[i]);
    }
    head_norm_ = GroupNormLayer<T>(store, name + ".head_norm", channels[0]);
    head_ = Conv3dLayer<T>(store, name + ".head", channels[0], num_classes, ConvSpec::cube(1));
    // background bias: prior odds kBackgroundPrior against a uniform foreground
    Tensor<T> b = head_.bias();
    b.data()[0] = static_cast<T>(
        std::log(kBackgroundPrior / (1.0 - kBackgroundPrior) * static_cast<double>(num_classes - 1)));
  }

  static constexpr double kBackgroundPrior = 0.9;

  Tensor<T> operator()(const Tensor<T>& bottom, const std::vector<Tensor<T>>& skips) const {
    if (skips.size() != levels_.size()) {
      throw ConfigError("decoder expects " + std::to_string(levels_.size()) + " skips, got " +
                        std::to_string(skips.size()));
    }
    Tensor<T> h = bottom;
    for (std::size_t i = levels_.size(); i-- > 0;) {
      const auto& lv = levels_[i];
      auto s = lv.dbm ? (*lv.dbm)(skips[i]) : skips[i];
      h = lv.res(lv.fuse(concat<T>({trilinear_upsample(h), s})));
    }
    return head_(relu(head_norm_(h)));
  }

  Shape account(const Shape& bottom, const std::vector<Shape>& skips, Accountant& acc) const {
    if (skips.size() != levels_.size()) throw ConfigError("decoder skip count mismatch");
    const std::string section = acc.section();
    Shape h = bottom;
    for (std::size_t i = levels_.size(); i-- > 0;) {
      const auto& lv = levels_[i];
      if (lv.dbm) {
        acc.set_section("dbm");
        lv.dbm->account(skips[i], acc);
        acc.set_section(section);
      }
      const Shape up{h[0], 2 * h[1], 2 * h[2], 2 * h[3]};
      acc.add(name_ + ".level" + std::to_string(i) + ".upsample", "upsample", 0, 0,
              static_cast<std::uint64_t>(numel(up)), up);
      if (up[1] != skips[i][1] || up[2] != skips[i][2] || up[3] != skips[i][3]) {
        throw ShapeError("decoder level " + std::to_string(i) + ": upsampled " + to_string(up) +
                         " vs skip " + to_string(skips[i]));
      }
      h = lv.fuse.account({up[0] + skips[i][0], up[1], up[2], up[3]}, acc);
      h = lv.res.account(h, acc);
    }
    h = head_norm_.account(h, acc);
    account_activation(name_ + ".head_act", h, acc);
    return head_.account(h, acc);
  }

  const Conv3dLayer<T>& head() const { return head_; }

 private:
  struct Level {
    std::optional<Dbm<T>> dbm;
    Conv3dLayer<T> fuse;
    ResBlock<T> res;
  };
  std::string name_;
  std::vector<Index> channels_;
  std::vector<Level> levels_;
  GroupNormLayer<T> head_norm_;
  Conv3dLayer<T> head_;
};

}  // namespace volseg
