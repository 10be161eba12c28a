#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "volseg/core/errors.hpp"
#include "volseg/core/rng.hpp"
#include "volseg/core/tensor.hpp"

namespace volseg {

enum class InitKind { kaiming, zeros, ones, normal };

struct Init {
  InitKind kind = InitKind::zeros;
  double scale = 0.0;  // fan-in for kaiming, stddev for normal

  static Init kaiming(Index fan_in) { return {InitKind::kaiming, static_cast<double>(fan_in)}; }
  static Init zeros() { return {InitKind::zeros, 0.0}; }
  static Init ones() { return {InitKind::ones, 0.0}; }
  static Init normal(double stddev) { return {InitKind::normal, stddev}; }
};

/// Ordered set of uniquely named trainable tensors. Every value is drawn
/// from a stream seeded by (model seed, parameter name), so the initial
/// values do not depend on construction order or on the scalar type.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor<T> add(const std::string& name, Shape shape, Init init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
    const Index n = numel(shape);
    std::vector<T> values(static_cast<std::size_t>(n));
    switch (init.kind) {
      case InitKind::zeros:
        break;
      case InitKind::ones:
        std::fill(values.begin(), values.end(), T(1));
        break;
      case InitKind::kaiming:
      case InitKind::normal: {
        const double sd =
            init.kind == InitKind::kaiming ? std::sqrt(2.0 / init.scale) : init.scale;
        Rng rng(mix_seed(seed_, fnv1a(name)));
        for (auto& v : values) v = static_cast<T>(rng.normal() * sd);
        break;
      }
    }
    auto t = Tensor<T>::from(std::move(shape), std::move(values), true);
    index_.emplace(name, entries_.size());
    entries_.push_back({name, t});
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::uint64_t seed() const { return seed_; }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Tensor<T> at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].value;
  }

  std::uint64_t count() const {
    std::uint64_t total = 0;
    for (const auto& e : entries_) total += static_cast<std::uint64_t>(e.value.numel());
    return total;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

 private:
  std::uint64_t seed_;
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace volseg
