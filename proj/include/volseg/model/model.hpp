#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "volseg/model/config.hpp"
#include "volseg/nn/bottleneck.hpp"
#include "volseg/nn/decoder.hpp"
#include "volseg/nn/encoder.hpp"

namespace volseg {

/// Section of a parameter or layer, derived from its top-level name.
inline std::string section_of(const std::string& name) {
  return name.substr(0, name.find('.'));
}

template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), params_(seed) {
    cfg_.validate();
    encoder_ = Encoder<T>(params_, "encoder", cfg_.in_channels, cfg_.stage_channels,
                          cfg_.encoder_blocks);
    if (cfg_.use_transformer) {
      const AttentionConfig attn = cfg_.attention();
      bottleneck_.emplace(params_, cfg_.channels_k(), attn, cfg_.depth,
                          cfg_.ffn_ratio * attn.dim, cfg_.restore_mid_channels,
                          cfg_.token_grid(), cfg_.use_fem);
    }
    std::optional<DbmConfig> dbm;
    if (cfg_.use_dbm) dbm = cfg_.dbm();
    decoder_ = Decoder<T>(params_, "decoder", cfg_.stage_channels, cfg_.num_classes, dbm);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  Shape input_shape() const {
    return {cfg_.in_channels, cfg_.input_size[0], cfg_.input_size[1], cfg_.input_size[2]};
  }

  /// C x H x W x D volume -> num_classes x H x W x D logits.
  Tensor<T> forward(const Tensor<T>& x, AttentionProbe<T>* probe = nullptr) const {
    if (x.shape() != input_shape()) {
      throw ShapeError("model '" + cfg_.name + "' expects input " + to_string(input_shape()) +
                       ", got " + to_string(x.shape()));
    }
    auto enc = encoder_(x);
    auto bottom = bottleneck_ ? (*bottleneck_)(enc.features, probe) : enc.features;
    return decoder_(bottom, enc.skips);
  }

  /// Symbolic walk of the forward program for an input of shape `in`.
  std::vector<LayerRow> account(const Shape& in) const {
    Accountant acc;
    acc.set_section("encoder");
    std::vector<Shape> skips;
    Shape s = encoder_.account(in, acc, &skips);
    if (bottleneck_) {
      acc.set_section("transformer");
      s = bottleneck_->account(s, acc);
    }
    acc.set_section("decoder");
    decoder_.account(s, skips, acc);
    return acc.take();
  }

  const Encoder<T>& encoder() const { return encoder_; }
  const std::optional<TransformerBottleneck<T>>& bottleneck() const { return bottleneck_; }
  const Decoder<T>& decoder() const { return decoder_; }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  Encoder<T> encoder_;
  std::optional<TransformerBottleneck<T>> bottleneck_;
  Decoder<T> decoder_;
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  return Model<T>(cfg, seed);
}

template <typename T>
Model<T> build_transbtsv2(ModelConfig cfg, std::uint64_t seed) {
  cfg.use_transformer = cfg.use_fem = cfg.use_dbm = cfg.use_qk_expand = true;
  return Model<T>(std::move(cfg), seed);
}

template <typename T>
Model<T> build_transbts_v1(std::uint64_t seed, Triple input_size = {128, 128, 128}) {
  auto cfg = ModelConfig::transbts_v1();
  cfg.input_size = input_size;
  return Model<T>(std::move(cfg), seed);
}

template <typename T>
Model<T> build_ablation(AblationVariant variant, std::uint64_t seed,
                        Triple input_size = {128, 128, 128}) {
  auto cfg = ModelConfig::ablation(variant);
  cfg.input_size = input_size;
  return Model<T>(std::move(cfg), seed);
}

/// Deep-narrow (d=256) and shallow-wide (L=1, d=512, E=1.5) models. The deep
/// model's depth is the L in [1, 16] whose parameter count is closest to
/// `params_budget` (0 = the shallow-wide model's count).
template <typename T>
std::pair<Model<T>, Model<T>> build_depth_width_pair(std::uint64_t params_budget,
                                                     std::uint64_t seed,
                                                     Triple input_size = {128, 128, 128}) {
  auto [deep_cfg, wide_cfg] = ModelConfig::depth_width_pair();
  deep_cfg.input_size = wide_cfg.input_size = input_size;
  Model<T> wide(wide_cfg, seed);
  const double budget =
      static_cast<double>(params_budget ? params_budget : wide.params().count());
  // params are affine in L, so two probes fix the line
  auto count_at = [&](Index depth) {
    auto c = deep_cfg;
    c.depth = depth;
    return static_cast<double>(Model<float>(c, seed).params().count());
  };
  const double p1 = count_at(1), p2 = count_at(2);
  Index best = 1;
  double best_gap = std::abs(p1 - budget);
  for (Index l = 2; l <= 16; ++l) {
    const double gap = std::abs(p1 + (p2 - p1) * static_cast<double>(l - 1) - budget);
    if (gap < best_gap) {
      best = l;
      best_gap = gap;
    }
  }
  deep_cfg.depth = best;
  return {Model<T>(deep_cfg, seed), std::move(wide)};
}

}  // namespace volseg
