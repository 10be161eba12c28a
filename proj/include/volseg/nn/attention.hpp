#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "volseg/nn/layers.hpp"

namespace volseg {

enum class AttentionMode { joint, spatial_only, split_cascaded, split_parallel };

inline std::string_view to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::joint: return "joint";
    case AttentionMode::spatial_only: return "spatial_only";
    case AttentionMode::split_cascaded: return "split_cascaded";
    case AttentionMode::split_parallel: return "split_parallel";
  }
  return "?";
}

inline AttentionMode parse_attention_mode(std::string_view text) {
  for (auto m : {AttentionMode::joint, AttentionMode::spatial_only,
                 AttentionMode::split_cascaded, AttentionMode::split_parallel}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown attention mode '" + std::string(text) + "'");
}

/// Token set an attention core attends over. The token grid is h x w x d'
/// with tokens ordered row-major (depth fastest).
enum class AttentionScope { joint, spatial, slice };

struct AttentionConfig {
  Index dim = 512;     // d
  Index qk_dim = 768;  // d_m
  Index heads = 8;
  AttentionMode mode = AttentionMode::joint;

  static AttentionConfig make(Index d, double expansion, Index heads, AttentionMode mode,
                              bool qk_expand = true) {
    AttentionConfig c;
    c.dim = d;
    c.qk_dim = qk_expand ? static_cast<Index>(std::llround(expansion * static_cast<double>(d))) : d;
    c.heads = heads;
    c.mode = mode;
    c.validate();
    return c;
  }

  void validate() const {
    if (dim < 1 || heads < 1) throw ConfigError("attention needs positive dim and heads");
    if (dim % heads != 0 || qk_dim % heads != 0) {
      throw ConfigError("heads=" + std::to_string(heads) + " must divide d=" +
                        std::to_string(dim) + " and d_m=" + std::to_string(qk_dim));
    }
    if (qk_dim < dim) throw ConfigError("d_m must not be smaller than d");
  }
};

/// Records every attention-weight tensor produced during a forward pass.
template <typename T>
struct AttentionProbe {
  std::vector<std::pair<std::string, Tensor<T>>> weights;
};

namespace detail {

inline std::pair<Index, Index> scope_groups(AttentionScope s, const Triple& grid) {
  const Index a = grid[0] * grid[1], b = grid[2];
  switch (s) {
    case AttentionScope::joint: return {1, a * b};
    case AttentionScope::spatial: return {b, a};  // one group per depth slice
    case AttentionScope::slice: return {a, b};    // one group per spatial site
  }
  return {1, a * b};
}

/// N x c tokens -> (groups*heads) x M x (c/heads).
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, AttentionScope s, const Triple& grid, Index heads) {
  const Index n = x.dim(0), dh = x.dim(1) / heads;
  const Index a = grid[0] * grid[1], b = grid[2];
  switch (s) {
    case AttentionScope::joint:
      return permute(reshape(x, {n, heads, dh}), {1, 0, 2});
    case AttentionScope::spatial:
      return reshape(permute(reshape(x, {a, b, heads, dh}), {1, 2, 0, 3}), {b * heads, a, dh});
    case AttentionScope::slice:
      return reshape(permute(reshape(x, {a, b, heads, dh}), {0, 2, 1, 3}), {a * heads, b, dh});
  }
  return x;
}

/// Inverse of split_heads.
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& y, AttentionScope s, const Triple& grid, Index heads) {
  const Index dh = y.dim(2);
  const Index a = grid[0] * grid[1], b = grid[2];
  const Index n = a * b;
  switch (s) {
    case AttentionScope::joint:
      return reshape(permute(y, {1, 0, 2}), {n, heads * dh});
    case AttentionScope::spatial:
      return reshape(permute(reshape(y, {b, heads, a, dh}), {2, 0, 1, 3}), {n, heads * dh});
    case AttentionScope::slice:
      return reshape(permute(reshape(y, {a, heads, b, dh}), {0, 2, 1, 3}), {n, heads * dh});
  }
  return y;
}

}  // namespace detail

/// Tokens (N x c) <-> volume (c x h x w x d').
template <typename T>
Tensor<T> volume_from_tokens(const Tensor<T>& tokens, const Triple& grid) {
  if (tokens.rank() != 2 || tokens.dim(0) != grid[0] * grid[1] * grid[2]) {
    throw ConfigError("token count " + std::to_string(tokens.dim(0)) +
                      " does not match the token grid " + to_string(Shape(grid.begin(), grid.end())));
  }
  return reshape(transpose(tokens), {tokens.dim(1), grid[0], grid[1], grid[2]});
}

template <typename T>
Tensor<T> tokens_from_volume(const Tensor<T>& volume) {
  const Index c = volume.dim(0);
  return transpose(reshape(volume, {c, volume.numel() / c}));
}

/// Flexibly widened multi-head self-attention: queries and keys are
/// projected to d_m, values stay at d; keys and values are computed from a
/// depth-wise-convolved, layer-normalised copy of the tokens.
template <typename T>
class FwMhsa {
 public:
  FwMhsa() = default;
  FwMhsa(ParamStore<T>& store, const std::string& name, const AttentionConfig& cfg,
         const Triple& grid)
      : name_(name), cfg_(cfg), grid_(grid) {
    cfg.validate();
    const Index d = cfg.dim;
    wq_ = Linear<T>(store, name + ".q", d, cfg.qk_dim, false);
    wk_ = Linear<T>(store, name + ".k", d, cfg.qk_dim, false);
    wv_ = Linear<T>(store, name + ".v", d, d, false);
    dwconv_ = Conv3dLayer<T>(store, name + ".dwconv", d, d, ConvSpec::same(3, d));
    kv_norm_ = LayerNormLayer<T>(store, name + ".kv_norm", d);
    proj_ = Linear<T>(store, name + ".proj", d, d, true);
  }

  Tensor<T> operator()(const Tensor<T>& x, AttentionScope scope,
                       AttentionProbe<T>* probe = nullptr) const {
    check_tokens(x.shape());
    const Index h = cfg_.heads;
    auto q = wq_(x);
    auto kv = kv_norm_(tokens_from_volume(dwconv_(volume_from_tokens(x, grid_))));
    auto k = wk_(kv);
    auto v = wv_(kv);
    auto qs = detail::split_heads(q, scope, grid_, h);
    auto ks = detail::split_heads(k, scope, grid_, h);
    auto vs = detail::split_heads(v, scope, grid_, h);
    auto scores = scale(bmm(qs, ks, true), T(1) / std::sqrt(static_cast<T>(cfg_.dim)));
    auto weights = softmax_lastdim(scores);
    if (probe) probe->weights.emplace_back(name_, weights);
    auto context = detail::merge_heads(bmm(weights, vs), scope, grid_, h);
    return proj_(context);
  }

  Shape account(const Shape& in, AttentionScope scope, Accountant& acc) const {
    check_tokens(in);
    const Index n = in[0];
    wq_.account(in, acc);
    Shape vol{cfg_.dim, grid_[0], grid_[1], grid_[2]};
    dwconv_.account(vol, acc);
    kv_norm_.account(in, acc);
    wk_.account(in, acc);
    wv_.account(in, acc);
    const auto [groups, m] = detail::scope_groups(scope, grid_);
    const Index gh = groups * cfg_.heads;
    const Shape score_shape{gh, m, m};
    acc.add(name_ + ".scores", "bmm", 0,
            static_cast<std::uint64_t>(gh * m * m * (cfg_.qk_dim / cfg_.heads)), 0, score_shape);
    acc.add(name_ + ".softmax", "softmax", 0, 0, static_cast<std::uint64_t>(gh * m * m),
            score_shape);
    acc.add(name_ + ".context", "bmm", 0,
            static_cast<std::uint64_t>(gh * m * m * (cfg_.dim / cfg_.heads)), 0,
            Shape{n, cfg_.dim});
    return proj_.account(in, acc);
  }

  const AttentionConfig& config() const { return cfg_; }
  const Linear<T>& query() const { return wq_; }
  const Linear<T>& key() const { return wk_; }
  const Linear<T>& value() const { return wv_; }
  const Linear<T>& projection() const { return proj_; }
  const Conv3dLayer<T>& dwconv() const { return dwconv_; }

 private:
  void check_tokens(const Shape& in) const {
    if (in.size() != 2 || in[1] != cfg_.dim) {
      throw ShapeError(name_ + ": expects N x " + std::to_string(cfg_.dim) + " tokens, got " +
                       to_string(in));
    }
    if (in[0] != grid_[0] * grid_[1] * grid_[2]) {
      throw ConfigError(name_ + ": " + std::to_string(in[0]) +
                        " tokens do not fill the bound token grid");
    }
  }

  std::string name_;
  AttentionConfig cfg_;
  Triple grid_{};
  Linear<T> wq_, wk_, wv_, proj_;
  Conv3dLayer<T> dwconv_;
  LayerNormLayer<T> kv_norm_;
};

/// FW-MHSA under one of the four token-grouping modes. The first stage
/// (joint or spatial) is named `name`; split modes add a slice stage named
/// `name + "_slice"`. Cascaded: y = spatial(x), out = y + slice(y).
/// Parallel: out = spatial(x) + slice(x).
template <typename T>
class AttentionLayer {
 public:
  AttentionLayer() = default;
  AttentionLayer(ParamStore<T>& store, const std::string& name, const AttentionConfig& cfg,
                 const Triple& grid)
      : mode_(cfg.mode), first_(store, name, cfg, grid) {
    if (split()) second_ = FwMhsa<T>(store, name + "_slice", cfg, grid);
  }

  Tensor<T> operator()(const Tensor<T>& x, AttentionProbe<T>* probe = nullptr) const {
    switch (mode_) {
      case AttentionMode::joint:
        return first_(x, AttentionScope::joint, probe);
      case AttentionMode::spatial_only:
        return first_(x, AttentionScope::spatial, probe);
      case AttentionMode::split_cascaded: {
        auto y = first_(x, AttentionScope::spatial, probe);
        return add(y, second_(y, AttentionScope::slice, probe));
      }
      case AttentionMode::split_parallel:
        return add(first_(x, AttentionScope::spatial, probe),
                   second_(x, AttentionScope::slice, probe));
    }
    throw ConfigError("unknown attention mode");
  }

  Shape account(const Shape& in, Accountant& acc) const {
    switch (mode_) {
      case AttentionMode::joint:
        return first_.account(in, AttentionScope::joint, acc);
      case AttentionMode::spatial_only:
        return first_.account(in, AttentionScope::spatial, acc);
      case AttentionMode::split_cascaded:
      case AttentionMode::split_parallel:
        first_.account(in, AttentionScope::spatial, acc);
        return second_.account(in, AttentionScope::slice, acc);
    }
    throw ConfigError("unknown attention mode");
  }

  bool split() const {
    return mode_ == AttentionMode::split_cascaded || mode_ == AttentionMode::split_parallel;
  }
  const FwMhsa<T>& first() const { return first_; }
  const FwMhsa<T>& second() const { return second_; }

 private:
  AttentionMode mode_ = AttentionMode::joint;
  FwMhsa<T> first_, second_;
};

template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParamStore<T>& store, const std::string& name, Index dim, Index hidden)
      : name_(name),
        fc1_(store, name + ".fc1", dim, hidden, true),
        fc2_(store, name + ".fc2", hidden, dim, true) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2_(gelu(fc1_(x))); }

  Shape account(const Shape& in, Accountant& acc) const {
    Shape h = fc1_.account(in, acc);
    acc.add(name_ + ".act", "gelu", 0, 0, static_cast<std::uint64_t>(numel(h)), h);
    return fc2_.account(h, acc);
  }

 private:
  std::string name_;
  Linear<T> fc1_, fc2_;
};

/// Pre-norm block: z' = attn(LN(z)) + z, out = FFN(LN(z')) + z'.
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& store, const std::string& name, const AttentionConfig& cfg,
                   const Triple& grid, Index ffn_hidden)
      : norm1_(store, name + ".norm1", cfg.dim),
        attn_(store, name + ".attn", cfg, grid),
        norm2_(store, name + ".norm2", cfg.dim),
        ffn_(store, name + ".ffn", cfg.dim, ffn_hidden) {}

  Tensor<T> operator()(const Tensor<T>& z, AttentionProbe<T>* probe = nullptr) const {
    auto mid = add(attn_(norm1_(z), probe), z);
    return add(ffn_(norm2_(mid)), mid);
  }

  Shape account(const Shape& in, Accountant& acc) const {
    norm1_.account(in, acc);
    attn_.account(in, acc);
    norm2_.account(in, acc);
    return ffn_.account(in, acc);
  }

  const AttentionLayer<T>& attention() const { return attn_; }

 private:
  LayerNormLayer<T> norm1_;
  AttentionLayer<T> attn_;
  LayerNormLayer<T> norm2_;
  FeedForward<T> ffn_;
};

}  // namespace volseg
