#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "volseg/core/errors.hpp"
#include "volseg/core/tensor.hpp"

namespace volseg {

enum class Convention { mac, flops2 };

inline std::string_view to_string(Convention c) {
  return c == Convention::mac ? "mac" : "flops2";
}

inline Convention parse_convention(std::string_view text) {
  if (text == "mac") return Convention::mac;
  if (text == "flops2") return Convention::flops2;
  throw ConfigError("unknown FLOP convention '" + std::string(text) +
                    "' (expected mac or flops2)");
}

/// One accounted layer: parameters it owns and the work of one forward pass.
struct LayerRow {
  std::string name;
  std::string section;
  std::string kind;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t aux = 0;  // element ops: norms, softmax, activations, resampling
  Shape output;
};

/// Collects rows while a model walks its forward program symbolically.
class Accountant {
 public:
  void set_section(std::string section) { section_ = std::move(section); }
  const std::string& section() const { return section_; }

  void add(std::string name, std::string kind, std::uint64_t params, std::uint64_t macs,
           std::uint64_t aux, Shape output) {
    rows_.push_back({std::move(name), section_, std::move(kind), params, macs, aux,
                     std::move(output)});
  }

  const std::vector<LayerRow>& rows() const { return rows_; }
  std::vector<LayerRow> take() { return std::move(rows_); }

 private:
  std::string section_ = "model";
  std::vector<LayerRow> rows_;
};

inline std::uint64_t conv_macs(const Shape& out, Index c_in, Index groups, Index taps) {
  return static_cast<std::uint64_t>(numel(out) * (c_in / groups) * taps);
}

}  // namespace volseg
