#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "volseg/core/gradcheck.hpp"
#include "volseg/core/interp.hpp"
#include "volseg/model/model.hpp"

namespace volseg {

enum class GradCheckScope { primitives, blocks, end2end };

inline std::string_view to_string(GradCheckScope s) {
  switch (s) {
    case GradCheckScope::primitives: return "primitives";
    case GradCheckScope::blocks: return "blocks";
    case GradCheckScope::end2end: return "end2end";
  }
  return "?";
}

inline GradCheckScope parse_gradcheck_scope(std::string_view text) {
  for (auto s : {GradCheckScope::primitives, GradCheckScope::blocks, GradCheckScope::end2end}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown gradcheck scope '" + std::string(text) +
                    "' (expected primitives, blocks or end2end)");
}

struct GradCheckUnit {
  std::string name;
  GradCheckReport report;
};

/// Micro configuration used by the end-to-end check: every GroupNorm group
/// holds at least three channels, so no bias is normalised away entirely.
inline ModelConfig micro_model_config() {
  ModelConfig c;
  c.name = "micro";
  c.in_channels = 2;
  c.num_classes = 2;
  c.input_size = {8, 8, 8};
  c.stage_channels = {6, 12, 24};
  c.encoder_blocks = {1, 1, 1};
  c.embed_dim = 16;
  c.expansion = 1.5;
  c.heads = 2;
  c.ffn_ratio = 2;
  c.restore_mid_channels = 6;
  c.dbm_reduction = 2;
  return c;
}

namespace detail {

inline Tensor<double> random_leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v), true);
}

/// Moves every parameter off its initial value. Zero-initialised offsets
/// would otherwise put deformable sampling points exactly on the grid,
/// where trilinear interpolation has a kink.
inline void jitter(ParamStore<double>& store, Rng& rng, double amplitude) {
  for (const auto& e : store.entries()) {
    Tensor<double> t = e.value;
    for (auto& v : t.data()) v += rng.uniform(-amplitude, amplitude);
  }
}

inline std::vector<NamedInput> with_params(std::vector<NamedInput> inputs,
                                           const ParamStore<double>& store) {
  for (const auto& e : store.entries()) inputs.emplace_back(e.name, e.value);
  return inputs;
}

using UnitFn = std::function<GradCheckReport(const GradCheckOptions&)>;

inline GradCheckOptions probed(GradCheckOptions o, Index probes) {
  if (o.max_probes == 0) o.max_probes = probes;
  return o;
}

inline std::vector<std::pair<std::string, UnitFn>> primitive_units(std::uint64_t seed) {
  std::vector<std::pair<std::string, UnitFn>> u;
  u.emplace_back("conv3d", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 1));
    auto x = random_leaf({4, 5, 4, 5}, rng);
    auto w = random_leaf({4, 2, 3, 2, 3}, rng);
    auto b = random_leaf({4}, rng);
    ConvSpec spec{{3, 2, 3}, {2, 1, 2}, {1, 0, 1}, 2};
    return grad_check([spec](const auto& v) { return conv3d(v[0], v[1], v[2], spec); },
                      {{"input", x}, {"weight", w}, {"bias", b}}, o);
  });
  u.emplace_back("depthwise_conv3d", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 2));
    auto x = random_leaf({3, 4, 4, 4}, rng);
    auto w = random_leaf({3, 1, 3, 3, 3}, rng);
    return grad_check(
        [](const auto& v) { return depthwise_conv3d(v[0], v[1], ConvSpec::same(3, 3)); },
        {{"input", x}, {"weight", w}}, o);
  });
  u.emplace_back("matmul", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 3));
    auto a = random_leaf({5, 7}, rng);
    auto b = random_leaf({7, 3}, rng);
    return grad_check([](const auto& v) { return matmul(v[0], v[1]); }, {{"a", a}, {"b", b}},
                      o);
  });
  u.emplace_back("bmm", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 4));
    auto a = random_leaf({3, 4, 5}, rng);
    auto b = random_leaf({3, 6, 5}, rng);
    return grad_check([](const auto& v) { return bmm(v[0], v[1], true); },
                      {{"a", a}, {"b", b}}, o);
  });
  u.emplace_back("softmax_lastdim", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 5));
    auto x = random_leaf({4, 6}, rng, -3.0, 3.0);
    return grad_check([](const auto& v) { return softmax_lastdim(v[0]); }, {{"input", x}}, o);
  });
  u.emplace_back("layer_norm", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 6));
    auto x = random_leaf({5, 8}, rng);
    auto g = random_leaf({8}, rng, 0.5, 1.5);
    auto b = random_leaf({8}, rng);
    return grad_check([](const auto& v) { return layer_norm(v[0], v[1], v[2]); },
                      {{"input", x}, {"gamma", g}, {"beta", b}}, o);
  });
  u.emplace_back("group_norm", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 7));
    auto x = random_leaf({6, 3, 3, 2}, rng);
    auto g = random_leaf({6}, rng, 0.5, 1.5);
    auto b = random_leaf({6}, rng);
    return grad_check([](const auto& v) { return group_norm(v[0], 2, v[1], v[2]); },
                      {{"input", x}, {"gamma", g}, {"beta", b}}, o);
  });
  u.emplace_back("pointwise", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 8));
    auto a = random_leaf({2, 3, 2, 2}, rng);
    auto b = random_leaf({3, 3, 2, 2}, rng);
    auto bias = random_leaf({5}, rng);
    return grad_check(
        [](const auto& v) {
          auto c = concat<double>({v[0], mul(v[1], v[1])});
          c = add_channel_bias(reshape(c, {5, 12}), v[2]);
          auto p = permute(reshape(c, {5, 3, 4}), {2, 0, 1});
          return sub(gelu(p), scale(relu(p), 0.5));
        },
        {{"a", a}, {"b", b}, {"bias", bias}}, o);
  });
  u.emplace_back("trilinear_upsample", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 9));
    auto x = random_leaf({2, 2, 3, 2}, rng);
    return grad_check([](const auto& v) { return trilinear_upsample(v[0]); }, {{"input", x}},
                      o);
  });
  u.emplace_back("grid_sample_trilinear", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 10));
    auto x = random_leaf({2, 3, 4, 3}, rng);
    auto loc = random_leaf({12, 3}, rng, -0.8, 3.6);
    return grad_check([](const auto& v) { return grid_sample_trilinear(v[0], v[1]); },
                      {{"input", x}, {"locations", loc}}, o);
  });
  u.emplace_back("deformable_conv3d", [seed](const GradCheckOptions& o) {
    Rng rng(mix_seed(seed, 11));
    auto x = random_leaf({2, 3, 3, 3}, rng);
    auto w = random_leaf({3, 2, 3, 3, 3}, rng);
    auto b = random_leaf({3}, rng);
    auto off = random_leaf({81, 3, 3, 3}, rng, -0.9, 0.9);
    return grad_check(
        [](const auto& v) { return deformable_conv3d(v[0], v[1], v[2], v[3], 3); },
        {{"input", x}, {"weight", w}, {"bias", b}, {"offsets", off}}, o);
  });
  return u;
}

inline std::vector<std::pair<std::string, UnitFn>> block_units(std::uint64_t seed) {
  std::vector<std::pair<std::string, UnitFn>> u;
  const Triple grid{2, 2, 2};
  u.emplace_back("res_block", [seed](const GradCheckOptions& o) {
    ParamStore<double> store(seed);
    ResBlock<double> block(store, "res", 6);
    Rng rng(mix_seed(seed, 21));
    jitter(store, rng, 0.1);
    auto x = random_leaf({6, 3, 3, 3}, rng);
    return grad_check([&](const auto& v) { return block(v[0]); },
                      with_params({{"input", x}}, store), probed(o, 40));
  });
  u.emplace_back("encoder", [seed](const GradCheckOptions& o) {
    ParamStore<double> store(seed);
    Encoder<double> enc(store, "encoder", 2, {3, 6, 12}, {1, 1, 1});
    Rng rng(mix_seed(seed, 22));
    jitter(store, rng, 0.1);
    auto x = random_leaf({2, 8, 8, 8}, rng);
    return grad_check(
        [&](const auto& v) {
          auto out = enc(v[0]);
          std::vector<Tensor<double>> parts;
          parts.push_back(reshape(out.features, {out.features.numel()}));
          for (const auto& s : out.skips) parts.push_back(reshape(s, {s.numel()}));
          return concat(parts);
        },
        with_params({{"input", x}}, store), probed(o, 24));
  });
  u.emplace_back("feature_embed", [seed, grid](const GradCheckOptions& o) {
    ParamStore<double> store(seed);
    FeatureEmbed<double> embed(store, "expand", "position", 6, 12, grid, true);
    Rng rng(mix_seed(seed, 23));
    jitter(store, rng, 0.1);
    auto x = random_leaf({6, 2, 2, 2}, rng);
    return grad_check([&](const auto& v) { return embed(v[0]); },
                      with_params({{"input", x}}, store), probed(o, 40));
  });
  for (auto mode : {AttentionMode::joint, AttentionMode::spatial_only,
                    AttentionMode::split_cascaded, AttentionMode::split_parallel}) {
    u.emplace_back("fw_mhsa/" + std::string(to_string(mode)),
                   [seed, grid, mode](const GradCheckOptions& o) {
                     ParamStore<double> store(seed);
                     AttentionLayer<double> attn(store, "attn",
                                                 AttentionConfig::make(16, 1.5, 2, mode), grid);
                     Rng rng(mix_seed(seed, 24));
                     jitter(store, rng, 0.1);
                     auto x = random_leaf({8, 16}, rng);
                     return grad_check([&](const auto& v) { return attn(v[0]); },
                                       with_params({{"input", x}}, store), probed(o, 40));
                   });
  }
  u.emplace_back("transformer_block", [seed, grid](const GradCheckOptions& o) {
    ParamStore<double> store(seed);
    TransformerBlock<double> block(store, "block",
                                   AttentionConfig::make(16, 1.5, 2, AttentionMode::joint), grid,
                                   32);
    Rng rng(mix_seed(seed, 25));
    jitter(store, rng, 0.1);
    auto x = random_leaf({8, 16}, rng);
    return grad_check([&](const auto& v) { return block(v[0]); },
                      with_params({{"input", x}}, store), probed(o, 40));
  });
  u.emplace_back("feature_restore", [seed, grid](const GradCheckOptions& o) {
    ParamStore<double> store(seed);
    FeatureRestore<double> restore(store, "restore", 16, 6, 12, grid, true);
    Rng rng(mix_seed(seed, 26));
    jitter(store, rng, 0.1);
    auto x = random_leaf({8, 16}, rng);
    return grad_check([&](const auto& v) { return restore(v[0]); },
                      with_params({{"input", x}}, store), probed(o, 40));
  });
  u.emplace_back("dbm", [seed](const GradCheckOptions& o) {
    ParamStore<double> store(seed);
    Dbm<double> dbm(store, "dbm", DbmConfig{6, 2, 3});
    Rng rng(mix_seed(seed, 27));
    jitter(store, rng, 0.1);
    auto x = random_leaf({6, 3, 3, 3}, rng);
    return grad_check([&](const auto& v) { return dbm(v[0]); },
                      with_params({{"input", x}}, store), probed(o, 40));
  });
  u.emplace_back("decoder", [seed](const GradCheckOptions& o) {
    ParamStore<double> store(seed);
    Decoder<double> dec(store, "decoder", {6, 12, 24}, 2, DbmConfig{6, 2, 3});
    Rng rng(mix_seed(seed, 28));
    jitter(store, rng, 0.1);
    auto bottom = random_leaf({24, 1, 1, 1}, rng);
    auto s1 = random_leaf({12, 2, 2, 2}, rng);
    auto s0 = random_leaf({6, 4, 4, 4}, rng);
    return grad_check([&](const auto& v) { return dec(v[0], {v[2], v[1]}); },
                      with_params({{"bottom", bottom}, {"skip1", s1}, {"skip0", s0}}, store),
                      probed(o, 24));
  });
  return u;
}

inline std::vector<std::pair<std::string, UnitFn>> end2end_units(std::uint64_t seed) {
  std::vector<std::pair<std::string, UnitFn>> u;
  u.emplace_back("model/micro", [seed](const GradCheckOptions& o) {
    Model<double> model(micro_model_config(), seed);
    Rng rng(mix_seed(seed, 31));
    jitter(model.params(), rng, 0.1);
    auto x = random_leaf(model.input_shape(), rng);
    // roundoff through ~40 layers dominates the central difference below 1e-5
    auto opts = probed(o, 6);
    opts.step = std::max(opts.step, 1e-5);
    return grad_check([&](const auto& v) { return model.forward(v[0]); },
                      with_params({{"input", x}}, model.params()), opts);
  });
  return u;
}

}  // namespace detail

/// Runs every unit of `scope` at micro shapes in 64-bit. Blocks and the
/// end-to-end model probe a seeded subset of each tensor unless
/// `opts.max_probes` is set.
inline std::vector<GradCheckUnit> run_gradcheck_suite(GradCheckScope scope,
                                                      const GradCheckOptions& opts = {},
                                                      const std::string& only = "") {
  std::vector<std::pair<std::string, detail::UnitFn>> units;
  switch (scope) {
    case GradCheckScope::primitives: units = detail::primitive_units(opts.seed); break;
    case GradCheckScope::blocks: units = detail::block_units(opts.seed); break;
    case GradCheckScope::end2end: units = detail::end2end_units(opts.seed); break;
  }
  std::vector<GradCheckUnit> out;
  for (const auto& [name, fn] : units) {
    if (!only.empty() && name != only) continue;
    out.push_back({name, fn(opts)});
  }
  return out;
}

}  // namespace volseg
