#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "volseg/core/errors.hpp"
#include "volseg/core/rng.hpp"
#include "volseg/core/tensor.hpp"

namespace volseg {

using LabelVolume = std::vector<std::uint8_t>;

struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};

  bool contains(Index h, Index w, Index d) const {
    const double x = (static_cast<double>(h) - center[0]) / radii[0];
    const double y = (static_cast<double>(w) - center[1]) / radii[1];
    const double z = (static_cast<double>(d) - center[2]) / radii[2];
    return x * x + y * y + z * z <= 1.0;
  }
};

/// Image C x H x W x D plus one class index per voxel (H x W x D).
template <typename T>
struct SegmentationSample {
  Tensor<T> image;
  LabelVolume label;
  Index num_classes = 2;
  /// Nested regions, outermost first (class 1, 2, ...).
  std::vector<Ellipsoid> regions;

  Triple size() const { return {image.dim(1), image.dim(2), image.dim(3)}; }
  Index voxels() const { return image.dim(1) * image.dim(2) * image.dim(3); }
};

struct SyntheticSpec {
  Index samples = 8;
  Triple size{32, 32, 32};
  Index num_classes = 4;
  Index channels = 4;
  double noise = 0.3;
  /// Outer ellipsoid semi-axes as fractions of the extent along each axis.
  double outer_min = 0.22, outer_max = 0.36;
  /// Each inner region's semi-axes as a fraction of its parent's.
  double inner_min = 0.45, inner_max = 0.7;
  int max_attempts = 64;
};

/// Mean intensity of class k in channel c: every foreground class sits at
/// 0.5 above background, and class k is a further 1.0 brighter in channel
/// (k - 1) mod C.
inline double class_intensity(Index channel, Index cls, Index channels) {
  if (cls == 0) return 0.0;
  return 0.5 + ((cls - 1) % channels == channel ? 1.0 : 0.0);
}

namespace detail {

template <typename T>
SegmentationSample<T> draw_sample(const SyntheticSpec& spec, Rng& rng) {
  const Triple s = spec.size;
  const Index vox = s[0] * s[1] * s[2];
  SegmentationSample<T> out;
  out.num_classes = spec.num_classes;
  const Index nested = std::min<Index>(spec.num_classes - 1, 3);
  Ellipsoid e;
  for (int a = 0; a < 3; ++a) {
    const double ext = static_cast<double>(s[a]);
    e.radii[a] = rng.uniform(spec.outer_min, spec.outer_max) * ext;
    e.center[a] = (ext - 1.0) / 2.0 + rng.uniform(-0.1, 0.1) * ext;
  }
  out.regions.push_back(e);
  for (Index k = 1; k < nested; ++k) {
    Ellipsoid inner = out.regions.back();
    for (int a = 0; a < 3; ++a) {
      const double r = inner.radii[a] * rng.uniform(spec.inner_min, spec.inner_max);
      // keep the child inside its parent along this axis
      const double slack = inner.radii[a] - r;
      inner.center[a] += rng.uniform(-0.5, 0.5) * slack;
      inner.radii[a] = r;
    }
    out.regions.push_back(inner);
  }
  out.label.assign(static_cast<std::size_t>(vox), 0);
  Index v = 0;
  for (Index h = 0; h < s[0]; ++h)
    for (Index w = 0; w < s[1]; ++w)
      for (Index d = 0; d < s[2]; ++d, ++v) {
        for (std::size_t k = 0; k < out.regions.size(); ++k) {
          if (out.regions[k].contains(h, w, d)) out.label[v] = static_cast<std::uint8_t>(k + 1);
        }
      }
  std::vector<T> img(static_cast<std::size_t>(spec.channels * vox));
  for (Index c = 0; c < spec.channels; ++c) {
    for (Index i = 0; i < vox; ++i) {
      img[c * vox + i] = static_cast<T>(class_intensity(c, out.label[i], spec.channels) +
                                        spec.noise * rng.normal());
    }
  }
  out.image = Tensor<T>::from({spec.channels, s[0], s[1], s[2]}, std::move(img));
  return out;
}

inline bool has_all_classes(const LabelVolume& label, Index num_classes) {
  std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
  for (auto l : label) seen[l] = true;
  for (bool b : seen) {
    if (!b) return false;
  }
  return true;
}

}  // namespace detail

/// Nested-ellipsoid volumes on a noisy background. Sample i depends only on
/// (seed, i); draws missing a class are retried.
template <typename T>
std::vector<SegmentationSample<T>> gen_synthetic_dataset(const SyntheticSpec& spec,
                                                         std::uint64_t seed) {
  if (spec.num_classes < 2 || spec.num_classes > 4) {
    throw ConfigError("synthetic data supports 2 to 4 classes, got " +
                      std::to_string(spec.num_classes));
  }
  for (Index e : spec.size) {
    if (e < 8 || e % 8 != 0) throw ConfigError("synthetic volume extents must be multiples of 8");
  }
  std::vector<SegmentationSample<T>> out;
  for (Index i = 0; i < spec.samples; ++i) {
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_attempts && !ok; ++attempt) {
      Rng rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(i)),
                       static_cast<std::uint64_t>(attempt)));
      auto s = detail::draw_sample<T>(spec, rng);
      if (detail::has_all_classes(s.label, spec.num_classes)) {
        out.push_back(std::move(s));
        ok = true;
      }
    }
    if (!ok) {
      throw ConfigError("synthetic sample " + std::to_string(i) + " missed a class after " +
                        std::to_string(spec.max_attempts) + " attempts; enlarge the volume");
    }
  }
  return out;
}

// Preprocessing ----------------------------------------------------------------

/// Per-channel z-score over the voxels selected by `mask` (H x W x D, nonzero
/// = selected); unselected voxels are left as they are.
template <typename T>
Tensor<T> zscore_normalize(const Tensor<T>& image, const LabelVolume& mask, double eps = 1e-8) {
  const Index c = image.dim(0), vox = image.numel() / c;
  if (static_cast<Index>(mask.size()) != vox) {
    throw ShapeError("zscore mask has " + std::to_string(mask.size()) + " voxels, image has " +
                     std::to_string(vox));
  }
  Index selected = 0;
  for (auto m : mask) selected += m != 0;
  if (selected < 2) {
    throw ConfigError("zscore mask selects " + std::to_string(selected) +
                      " voxel(s); at least 2 are needed");
  }
  std::vector<T> out(image.values());
  for (Index ch = 0; ch < c; ++ch) {
    T* x = out.data() + ch * vox;
    double mean = 0.0;
    for (Index i = 0; i < vox; ++i) {
      if (mask[i]) mean += x[i];
    }
    mean /= static_cast<double>(selected);
    double var = 0.0;
    for (Index i = 0; i < vox; ++i) {
      if (mask[i]) var += (x[i] - mean) * (x[i] - mean);
    }
    const double sd = std::sqrt(var / static_cast<double>(selected));
    for (Index i = 0; i < vox; ++i) {
      if (mask[i]) x[i] = static_cast<T>((x[i] - mean) / (sd + eps));
    }
  }
  return Tensor<T>::from(image.shape(), std::move(out));
}

// Augmentation -----------------------------------------------------------------

struct AugmentConfig {
  Triple crop{0, 0, 0};  // 0 = keep the full extent
  bool flip = false;
  bool intensity_shift = false;
  double shift = 0.1;
};

template <typename T>
SegmentationSample<T> crop(const SegmentationSample<T>& s, const Triple& origin,
                           const Triple& extent) {
  const Triple in = s.size();
  for (int a = 0; a < 3; ++a) {
    if (extent[a] < 1 || origin[a] < 0 || origin[a] + extent[a] > in[a]) {
      throw ConfigError("crop " + std::to_string(extent[a]) + " at " +
                        std::to_string(origin[a]) + " does not fit extent " +
                        std::to_string(in[a]));
    }
  }
  const Index c = s.image.dim(0);
  const Index vin = in[0] * in[1] * in[2], vout = extent[0] * extent[1] * extent[2];
  SegmentationSample<T> out;
  out.num_classes = s.num_classes;
  out.regions = s.regions;
  for (auto& r : out.regions) {
    for (int a = 0; a < 3; ++a) r.center[a] -= static_cast<double>(origin[a]);
  }
  std::vector<T> img(static_cast<std::size_t>(c * vout));
  out.label.resize(static_cast<std::size_t>(vout));
  Index o = 0;
  for (Index h = 0; h < extent[0]; ++h)
    for (Index w = 0; w < extent[1]; ++w)
      for (Index d = 0; d < extent[2]; ++d, ++o) {
        const Index i = ((h + origin[0]) * in[1] + (w + origin[1])) * in[2] + (d + origin[2]);
        out.label[o] = s.label[i];
        for (Index ch = 0; ch < c; ++ch) img[ch * vout + o] = s.image.values()[ch * vin + i];
      }
  out.image = Tensor<T>::from({c, extent[0], extent[1], extent[2]}, std::move(img));
  return out;
}

/// Mirrors image and label along spatial axis 0, 1 or 2.
template <typename T>
SegmentationSample<T> flip(const SegmentationSample<T>& s, int axis) {
  const Triple e = s.size();
  const Index c = s.image.dim(0), vox = s.voxels();
  SegmentationSample<T> out = s;
  for (auto& r : out.regions) {
    r.center[axis] = static_cast<double>(e[axis] - 1) - r.center[axis];
  }
  std::vector<T> img(s.image.values().size());
  Index o = 0;
  for (Index h = 0; h < e[0]; ++h)
    for (Index w = 0; w < e[1]; ++w)
      for (Index d = 0; d < e[2]; ++d, ++o) {
        Index src[3] = {h, w, d};
        src[axis] = e[axis] - 1 - src[axis];
        const Index i = (src[0] * e[1] + src[1]) * e[2] + src[2];
        out.label[o] = s.label[i];
        for (Index ch = 0; ch < c; ++ch) img[ch * vox + o] = s.image.values()[ch * vox + i];
      }
  out.image = Tensor<T>::from(s.image.shape(), std::move(img));
  return out;
}

/// Random crop, per-axis flips (p = 0.5 each) and per-channel intensity
/// shift in [-shift, shift], in that order.
template <typename T>
SegmentationSample<T> augment(const SegmentationSample<T>& s, const AugmentConfig& cfg,
                              Rng& rng) {
  SegmentationSample<T> out = s;
  const Triple in = s.size();
  if (cfg.crop[0] || cfg.crop[1] || cfg.crop[2]) {
    Triple origin{}, extent{};
    for (int a = 0; a < 3; ++a) {
      extent[a] = cfg.crop[a] ? cfg.crop[a] : in[a];
      if (extent[a] > in[a]) {
        throw ConfigError("crop extent " + std::to_string(extent[a]) +
                          " is larger than the volume (" + std::to_string(in[a]) + ")");
      }
      origin[a] = static_cast<Index>(rng.below(static_cast<std::uint64_t>(in[a] - extent[a] + 1)));
    }
    out = crop(out, origin, extent);
  }
  if (cfg.flip) {
    for (int a = 0; a < 3; ++a) {
      if (rng.coin(0.5)) out = flip(out, a);
    }
  }
  if (cfg.intensity_shift) {
    const Index c = out.image.dim(0), vox = out.voxels();
    std::vector<T> img(out.image.values());
    for (Index ch = 0; ch < c; ++ch) {
      const T delta = static_cast<T>(rng.uniform(-cfg.shift, cfg.shift));
      for (Index i = 0; i < vox; ++i) img[ch * vox + i] += delta;
    }
    out.image = Tensor<T>::from(out.image.shape(), std::move(img));
  }
  return out;
}

// VOL1 / LBL1 files --------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError(path + ": truncated header");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline void expect_magic(std::istream& in, const char* magic, const std::string& path) {
  char m[4];
  if (!in.read(m, 4) || std::memcmp(m, magic, 4) != 0) {
    throw IoError(path + ": missing " + std::string(magic) + " magic");
  }
}

}  // namespace detail

/// "VOL1", u32 C, H, W, D, then little-endian f32 voxels.
template <typename T>
void write_volume(const std::string& path, const Tensor<T>& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("VOL1", 4);
  for (Index e : image.shape()) detail::write_u32(out, static_cast<std::uint32_t>(e));
  for (T v : image.values()) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::write_u32(out, bits);
  }
  if (!out) throw IoError("short write to " + path);
}

template <typename T>
Tensor<T> read_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  detail::expect_magic(in, "VOL1", path);
  Shape shape(4);
  for (auto& e : shape) e = detail::read_u32(in, path);
  std::vector<T> values(static_cast<std::size_t>(numel(shape)));
  for (auto& v : values) {
    const std::uint32_t bits = detail::read_u32(in, path);
    float f;
    std::memcpy(&f, &bits, 4);
    v = static_cast<T>(f);
  }
  return Tensor<T>::from(std::move(shape), std::move(values));
}

/// "LBL1", u32 H, W, D, then one u8 per voxel.
inline void write_labels(const std::string& path, const LabelVolume& label, const Triple& size) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("LBL1", 4);
  for (Index e : size) detail::write_u32(out, static_cast<std::uint32_t>(e));
  out.write(reinterpret_cast<const char*>(label.data()), static_cast<std::streamsize>(label.size()));
  if (!out) throw IoError("short write to " + path);
}

inline LabelVolume read_labels(const std::string& path, Triple* size = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  detail::expect_magic(in, "LBL1", path);
  Triple s{};
  for (auto& e : s) e = detail::read_u32(in, path);
  LabelVolume label(static_cast<std::size_t>(s[0] * s[1] * s[2]));
  if (!in.read(reinterpret_cast<char*>(label.data()), static_cast<std::streamsize>(label.size()))) {
    throw IoError(path + ": truncated label payload");
  }
  if (size) *size = s;
  return label;
}

}  // namespace volseg
