#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "volseg/core/keyvalue.hpp"
#include "volseg/model/model.hpp"
#include "volseg/train/data.hpp"
#include "volseg/train/loss.hpp"
#include "volseg/train/metrics.hpp"
#include "volseg/train/optim.hpp"

namespace volseg {

struct TrainConfig {
  double base_lr = 1e-3;
  Index warmup_epochs = 1;
  Index total_epochs = 25;
  double weight_decay = 1e-5;
  Index batch_size = 1;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  std::string precision = "f32";
  /// Evaluate on the training set every this many epochs (0 = last epoch only).
  Index eval_every = 5;

  Index samples = 8;
  Triple data_size{0, 0, 0};  // 0 = the model input size
  double noise = 0.3;
  std::uint64_t data_seed = 0;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& what) {
      throw ConfigError("field '" + field + "': " + what);
    };
    if (!(base_lr > 0.0)) fail("train.base_lr", "must be positive");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs) {
      fail("train.warmup_epochs", "must be in [0, total_epochs)");
    }
    if (weight_decay < 0.0) fail("train.weight_decay", "must be non-negative");
    if (batch_size < 1) fail("train.batch_size", "must be positive");
    if (precision != "f32" && precision != "f64") fail("train.precision", "expected f32 or f64");
    if (eval_every < 0) fail("train.eval_every", "must be non-negative");
    if (samples < 1) fail("data.samples", "must be positive");
    if (!(noise >= 0.0)) fail("data.noise", "must be non-negative");
  }

  Index steps_per_epoch() const { return (samples + batch_size - 1) / batch_size; }
  Index total_steps() const { return steps_per_epoch() * total_epochs; }

  /// Reads the train.* and data.* keys.
  static TrainConfig from_doc(KeyValueDoc& doc) {
    TrainConfig c;
    c.base_lr = doc.get_double("train.base_lr", c.base_lr);
    c.warmup_epochs = doc.get_int("train.warmup_epochs", c.warmup_epochs);
    c.total_epochs = doc.get_int("train.total_epochs", c.total_epochs);
    c.weight_decay = doc.get_double("train.weight_decay", c.weight_decay);
    c.batch_size = doc.get_int("train.batch_size", c.batch_size);
    c.seed = static_cast<std::uint64_t>(doc.get_int("train.seed", static_cast<Index>(c.seed)));
    auto crop = doc.get_ints("train.crop", {0, 0, 0});
    if (crop.size() == 1) crop = {crop[0], crop[0], crop[0]};
    if (crop.size() != 3) throw doc.field_error("train.crop", "expected H,W,D");
    c.augment.crop = {crop[0], crop[1], crop[2]};
    c.augment.flip = doc.get_bool("train.flip", c.augment.flip);
    c.augment.intensity_shift = doc.get_bool("train.intensity_shift", c.augment.intensity_shift);
    c.precision = doc.get_string("train.precision", c.precision);
    c.eval_every = doc.get_int("train.eval_every", c.eval_every);
    c.samples = doc.get_int("data.samples", c.samples);
    auto size = doc.get_ints("data.size", {0, 0, 0});
    if (size.size() == 1) size = {size[0], size[0], size[0]};
    if (size.size() != 3) throw doc.field_error("data.size", "expected H,W,D");
    c.data_size = {size[0], size[1], size[2]};
    c.noise = doc.get_double("data.noise", c.noise);
    c.data_seed =
        static_cast<std::uint64_t>(doc.get_int("data.seed", static_cast<Index>(c.data_seed)));
    c.validate();
    return c;
  }

  void write_doc(KeyValueDoc& doc) const {
    doc.set("train.base_lr", format_double(base_lr));
    doc.set("train.warmup_epochs", std::to_string(warmup_epochs));
    doc.set("train.total_epochs", std::to_string(total_epochs));
    doc.set("train.weight_decay", format_double(weight_decay));
    doc.set("train.batch_size", std::to_string(batch_size));
    doc.set("train.seed", std::to_string(seed));
    doc.set("train.crop", join_ints({augment.crop[0], augment.crop[1], augment.crop[2]}));
    doc.set("train.flip", augment.flip ? "true" : "false");
    doc.set("train.intensity_shift", augment.intensity_shift ? "true" : "false");
    doc.set("train.precision", precision);
    doc.set("train.eval_every", std::to_string(eval_every));
    doc.set("data.samples", std::to_string(samples));
    doc.set("data.size", join_ints({data_size[0], data_size[1], data_size[2]}));
    doc.set("data.noise", format_double(noise));
    doc.set("data.seed", std::to_string(data_seed));
  }

  /// Synthetic spec for a model; data_size 0 means the model input size.
  SyntheticSpec synthetic_spec(const ModelConfig& model) const {
    SyntheticSpec s;
    s.samples = samples;
    s.size = model.input_size;
    for (int a = 0; a < 3; ++a) {
      if (data_size[a]) s.size[a] = data_size[a];
    }
    s.num_classes = model.num_classes;
    s.channels = model.in_channels;
    s.noise = noise;
    return s;
  }
};

/// Generated samples, each z-scored per channel over the whole volume.
template <typename T>
std::vector<SegmentationSample<T>> make_training_set(const ModelConfig& model,
                                                     const TrainConfig& cfg) {
  auto data = gen_synthetic_dataset<T>(cfg.synthetic_spec(model), cfg.data_seed);
  for (auto& s : data) {
    s.image = zscore_normalize(s.image, LabelVolume(static_cast<std::size_t>(s.voxels()), 1));
  }
  return data;
}

template <typename T>
MetricsRecord evaluate(const Model<T>& model, const std::vector<SegmentationSample<T>>& data) {
  if (data.empty()) throw ConfigError("evaluate: empty dataset");
  NoGradGuard no_grad;
  const Index k = model.config().num_classes;
  MetricsRecord rec;
  rec.dice.assign(static_cast<std::size_t>(k - 1), 0.0);
  std::vector<double> hd_sum(static_cast<std::size_t>(k - 1), 0.0);
  std::vector<Index> hd_n(static_cast<std::size_t>(k - 1), 0);
  rec.confidence.resize(static_cast<std::size_t>(k - 1));
  for (Index c = 1; c < k; ++c) rec.confidence[c - 1].cls = c;
  for (const auto& s : data) {
    const auto logits = model.forward(s.image);
    rec.loss += static_cast<double>(softmax_dice_loss(logits, s.label).item());
    const auto probs = class_probabilities(logits);
    const auto pred = argmax_labels(probs, k);
    for (Index c = 1; c < k; ++c) {
      rec.dice[c - 1] += dice_score(pred, s.label, c);
      if (auto h = hd95(pred, s.label, s.size(), c)) {
        hd_sum[c - 1] += *h;
        hd_n[c - 1]++;
      }
    }
    const auto hist = confidence_histogram(probs, s.label, k);
    for (std::size_t c = 0; c < hist.size(); ++c) {
      for (std::size_t b = 0; b < 4; ++b) rec.confidence[c].counts[b] += hist[c].counts[b];
    }
  }
  const double n = static_cast<double>(data.size());
  rec.loss /= n;
  for (auto& d : rec.dice) d /= n;
  for (Index c = 1; c < k; ++c) {
    rec.hd95.push_back(hd_n[c - 1] ? std::optional<double>(hd_sum[c - 1] / hd_n[c - 1])
                                   : std::nullopt);
  }
  return rec;
}

struct TrainResult {
  std::vector<MetricsRecord> epochs;
  std::vector<double> step_losses;
  bool halted = false;
  std::string halt_reason;
};

/// Shuffle, augment, forward, loss, backward and Adam per step, with one
/// JSON line per epoch written to `log`. Sample order and augmentation draw
/// from streams keyed by (seed, epoch) and (seed, step), so the run is
/// reproducible. On a non-finite loss or gradient the parameters are rolled
/// back to the last state that produced a finite loss and training stops.
template <typename T>
TrainResult train(Model<T>& model, const std::vector<SegmentationSample<T>>& data,
                  const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  const Index n = static_cast<Index>(data.size());
  const Index per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  auto& params = model.params();
  Adam<T> adam(params, AdamConfig{.weight_decay = cfg.weight_decay});
  TrainResult result;
  std::vector<std::vector<T>> last_good;
  auto snapshot = [&] {
    last_good.clear();
    for (const auto& e : params.entries()) last_good.push_back(e.value.values());
  };
  auto restore = [&] {
    for (std::size_t p = 0; p < last_good.size(); ++p) {
      Tensor<T> t = params.entries()[p].value;
      std::copy(last_good[p].begin(), last_good[p].end(), t.data().begin());
    }
  };
  Index step = 0;
  for (Index epoch = 0; epoch < cfg.total_epochs && !result.halted; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.base_lr, cfg.warmup_epochs, cfg.total_epochs);
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    Rng shuffle(mix_seed(mix_seed(cfg.seed, 0x5348554646ULL), static_cast<std::uint64_t>(epoch)));
    for (Index i = n - 1; i > 0; --i) {
      std::swap(order[i], order[shuffle.below(static_cast<std::uint64_t>(i + 1))]);
    }
    double epoch_loss = 0.0;
    Index epoch_steps = 0;
    for (Index b = 0; b < per_epoch; ++b, ++step) {
      const Index lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      const T scale = T(1) / static_cast<T>(hi - lo);
      Rng aug_rng(mix_seed(mix_seed(cfg.seed, 0x415547ULL), static_cast<std::uint64_t>(step)));
      double loss = 0.0;
      params.zero_grad();
      for (Index j = lo; j < hi; ++j) {
        const auto sample = augment(data[order[j]], cfg.augment, aug_rng);
        const auto l = softmax_dice_loss(model.forward(sample.image), sample.label);
        loss += static_cast<double>(l.item()) / static_cast<double>(hi - lo);
        backward(l, std::span<const T>(&scale, 1));
      }
      if (!std::isfinite(loss)) {
        if (!last_good.empty()) restore();
        result.halted = true;
        result.halt_reason = "non-finite loss at step " + std::to_string(step);
        break;
      }
      snapshot();
      try {
        adam.step(lr);
      } catch (const NumericError& e) {
        result.halted = true;
        result.halt_reason = std::string(e.what()) + " at step " + std::to_string(step);
        break;
      }
      result.step_losses.push_back(loss);
      epoch_loss += loss;
      ++epoch_steps;
    }
    params.zero_grad();
    MetricsRecord rec;
    const bool last = epoch + 1 == cfg.total_epochs || result.halted;
    if (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0)) {
      rec = evaluate(model, data);
    }
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps)
                           : std::numeric_limits<double>::quiet_NaN();
    if (log) *log << rec.to_json().dump() << "\n" << std::flush;
    result.epochs.push_back(std::move(rec));
  }
  return result;
}

}  // namespace volseg
