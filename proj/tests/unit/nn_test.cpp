#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "support.hpp"
#include "volseg/model/model.hpp"
#include "volseg/verify/gradcheck_suites.hpp"

using namespace volseg;
using volseg::testing::max_abs_diff;
using volseg::testing::random_tensor;

namespace {

void fill(Tensor<double> t, double value) {
  for (auto& v : t.data()) v = value;
}

void set_delta_kernels(Tensor<double> w) {
  // C x 1 x 3 x 3 x 3, centre tap 1
  fill(w, 0.0);
  auto d = w.data();
  for (Index c = 0; c < w.dim(0); ++c) d[c * 27 + 13] = 1.0;
}

void expect_all_pass(const std::vector<GradCheckUnit>& units) {
  ASSERT_FALSE(units.empty());
  for (const auto& u : units) {
    for (const auto& e : u.report.entries) {
      EXPECT_TRUE(e.passed) << u.name << " / " << e.name << ": rel " << e.max_rel_error
                            << " at " << e.worst_index << " (analytic " << e.analytic
                            << ", numeric " << e.numeric << ")";
    }
  }
}

}  // namespace

// Gradient suites ------------------------------------------------------------

TEST(GradCheckSuite, EveryPrimitivePasses) {
  expect_all_pass(run_gradcheck_suite(GradCheckScope::primitives));
}

TEST(GradCheckSuite, EveryBlockPasses) {
  expect_all_pass(run_gradcheck_suite(GradCheckScope::blocks));
}

TEST(GradCheckSuite, EndToEndMicroModelPasses) {
  expect_all_pass(run_gradcheck_suite(GradCheckScope::end2end));
}

TEST(GradCheckSuite, CorruptedConvGradientIsDetected) {
  GradientFaultScope fault("conv3d");
  auto units = run_gradcheck_suite(GradCheckScope::blocks, {}, "res_block");
  ASSERT_EQ(units.size(), 1u);
  EXPECT_FALSE(units[0].report.passed());
}

TEST(GradCheckSuite, UnknownScopeIsRejected) {
  EXPECT_EQ(parse_gradcheck_scope("blocks"), GradCheckScope::blocks);
  EXPECT_THROW(parse_gradcheck_scope("everything"), ConfigError);
}

// Encoder --------------------------------------------------------------------

TEST(Encoder, ShapeContract) {
  ParamStore<double> store(1);
  Encoder<double> enc(store, "encoder", 4, {16, 32, 64, 128}, {1, 1, 2, 4});
  Rng rng(2);
  auto out = enc(random_tensor({4, 32, 32, 32}, rng));
  EXPECT_EQ(out.features.shape(), (Shape{128, 4, 4, 4}));
  ASSERT_EQ(out.skips.size(), 3u);
  EXPECT_EQ(out.skips[0].shape(), (Shape{16, 32, 32, 32}));
  EXPECT_EQ(out.skips[1].shape(), (Shape{32, 16, 16, 16}));
  EXPECT_EQ(out.skips[2].shape(), (Shape{64, 8, 8, 8}));
}

TEST(Encoder, ZeroInputGivesZeroOutput) {
  ParamStore<double> store(3);
  Encoder<double> enc(store, "encoder", 2, {4, 8, 16}, {1, 1, 1});
  auto out = enc(Tensor<double>::zeros({2, 8, 8, 8}));
  for (double v : out.features.values()) EXPECT_EQ(v, 0.0);
  for (const auto& s : out.skips) {
    for (double v : s.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Encoder, RejectsBadInputBeforeCompute) {
  ParamStore<double> store(4);
  Encoder<double> enc(store, "encoder", 2, {4, 8, 16, 32}, {0, 0, 0, 0});
  EXPECT_THROW(enc(Tensor<double>::zeros({2, 8, 8, 12})), ConfigError);
  EXPECT_THROW(enc(Tensor<double>::zeros({3, 8, 8, 8})), ShapeError);
}

// Feature embedding / restoration ---------------------------------------------

TEST(FeatureEmbed, TokenShapeAndPeDegenerate) {
  ParamStore<double> store(5);
  FeatureEmbed<double> embed(store, "encoder.expand", "transformer.position", 128, 512,
                             {4, 4, 4}, true);
  auto z = embed(Tensor<double>::zeros({128, 4, 4, 4}));
  EXPECT_EQ(z.shape(), (Shape{64, 512}));
  EXPECT_EQ(z.values(), embed.position().values());
}

TEST(FeatureEmbed, GridMismatchIsConfigError) {
  ParamStore<double> store(6);
  FeatureEmbed<double> embed(store, "e", "p", 8, 16, {2, 2, 2}, true);
  EXPECT_THROW(embed(Tensor<double>::zeros({8, 2, 2, 4})), ConfigError);
  EXPECT_THROW(embed(Tensor<double>::zeros({6, 2, 2, 2})), ShapeError);
}

TEST(FeatureRestore, ShapeContractAndRoundTrip) {
  ParamStore<double> store(7);
  FeatureRestore<double> restore(store, "decoder.restore", 512, 192, 128, {4, 4, 4}, true);
  Rng rng(8);
  auto tokens = random_tensor({64, 512}, rng);
  EXPECT_EQ(restore(tokens).shape(), (Shape{128, 4, 4, 4}));

  auto vol = random_tensor({5, 2, 3, 4}, rng);
  EXPECT_EQ(volume_from_tokens(tokens_from_volume(vol), {2, 3, 4}).values(), vol.values());
  // token n = (h, w, d) row-major, channel c
  auto t = tokens_from_volume(vol);
  EXPECT_EQ(t.shape(), (Shape{24, 5}));
  EXPECT_EQ(t.values()[(1 * 12 + 2 * 4 + 3) * 5 + 4], vol.values()[4 * 24 + 1 * 12 + 2 * 4 + 3]);

  EXPECT_THROW(restore(random_tensor({60, 512}, rng)), ConfigError);
}

// Attention -------------------------------------------------------------------

TEST(FwMhsa, IdenticalTokensGiveUniformWeights) {
  ParamStore<double> store(9);
  AttentionLayer<double> attn(store, "attn", AttentionConfig::make(16, 1.5, 2,
                                                                   AttentionMode::joint),
                              {2, 2, 2});
  // delta DWConv: border tokens see no padding, so keys are identical too
  set_delta_kernels(store.at("attn.dwconv.weight"));
  Rng rng(10);
  auto row = random_tensor({1, 16}, rng);
  std::vector<double> v;
  for (int n = 0; n < 8; ++n) v.insert(v.end(), row.values().begin(), row.values().end());
  AttentionProbe<double> probe;
  auto y = attn(Tensor<double>::from({8, 16}, v), &probe);
  ASSERT_EQ(probe.weights.size(), 1u);
  for (double w : probe.weights[0].second.values()) EXPECT_NEAR(w, 1.0 / 8.0, 1e-15);
  for (Index n = 1; n < 8; ++n) {
    for (Index j = 0; j < 16; ++j) EXPECT_EQ(y.values()[n * 16 + j], y.values()[j]);
  }
}

TEST(FwMhsa, SingleTokenAttendsToItself) {
  ParamStore<double> store(11);
  FwMhsa<double> attn(store, "attn", AttentionConfig::make(16, 1.5, 4, AttentionMode::joint),
                      {1, 1, 1});
  Rng rng(12);
  auto x = random_tensor({1, 16}, rng);
  AttentionProbe<double> probe;
  auto y = attn(x, AttentionScope::joint, &probe);
  for (double w : probe.weights[0].second.values()) EXPECT_EQ(w, 1.0);
  // one voxel: only the DWConv centre tap and bias touch it
  auto w = store.at("attn.dwconv.weight").values();
  auto b = store.at("attn.dwconv.bias").values();
  std::vector<double> conv(16);
  for (Index c = 0; c < 16; ++c) conv[c] = w[c * 27 + 13] * x.values()[c] + b[c];
  auto kv = layer_norm(Tensor<double>::from({1, 16}, conv), store.at("attn.kv_norm.weight"),
                       store.at("attn.kv_norm.bias"));
  auto expected = add_row_bias(matmul(matmul(kv, store.at("attn.v.weight")),
                                      store.at("attn.proj.weight")),
                               store.at("attn.proj.bias"));
  EXPECT_LT(max_abs_diff(y.values(), expected.values()), 1e-12);
}

TEST(FwMhsa, QkExpansionParameterDelta) {
  ParamStore<double> wide(1), narrow(1);
  FwMhsa<double> a(wide, "a", AttentionConfig::make(512, 1.5, 8, AttentionMode::joint),
                   {1, 1, 1});
  FwMhsa<double> b(narrow, "a", AttentionConfig::make(512, 1.0, 8, AttentionMode::joint),
                   {1, 1, 1});
  EXPECT_EQ(a.config().qk_dim, 768);
  EXPECT_EQ(wide.at("a.q.weight").numel() + wide.at("a.k.weight").numel(), 2 * 512 * 768);
  EXPECT_EQ(wide.count() - narrow.count(), 262144u);
  EXPECT_EQ(AttentionConfig::make(512, 1.5, 8, AttentionMode::joint, false).qk_dim, 512);
}

TEST(FwMhsa, HeadsMustDivideBothWidths) {
  EXPECT_THROW(AttentionConfig::make(16, 1.5, 5, AttentionMode::joint), ConfigError);
  // d = 16 divisible by 8 but d_m = 20 is not
  EXPECT_THROW(AttentionConfig::make(16, 1.25, 8, AttentionMode::joint), ConfigError);
  EXPECT_THROW(parse_attention_mode("axial"), ConfigError);
}

TEST(FwMhsa, JointAttentionIsTokenPermutationEquivariant) {
  ParamStore<double> store(13);
  AttentionLayer<double> attn(store, "attn", AttentionConfig::make(8, 1.5, 2,
                                                                   AttentionMode::joint),
                              {2, 3, 2});
  set_delta_kernels(store.at("attn.dwconv.weight"));
  Rng rng(14);
  auto x = random_tensor({12, 8}, rng);
  std::vector<Index> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  for (Index i = 11; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  auto permute_rows = [&](const Tensor<double>& t) {
    std::vector<double> v(t.values().size());
    for (Index n = 0; n < 12; ++n) {
      std::copy_n(t.values().begin() + perm[n] * 8, 8, v.begin() + n * 8);
    }
    return Tensor<double>::from({12, 8}, v);
  };
  auto lhs = attn(permute_rows(x));
  auto rhs = permute_rows(attn(x));
  EXPECT_LT(max_abs_diff(lhs.values(), rhs.values()), 1e-12);
}

TEST(AttentionModes, JointEqualsSpatialOnSingleSlice) {
  ParamStore<double> s1(15), s2(15);
  AttentionLayer<double> joint(s1, "attn", AttentionConfig::make(8, 1.5, 2,
                                                                 AttentionMode::joint),
                               {2, 2, 1});
  AttentionLayer<double> spatial(s2, "attn",
                                 AttentionConfig::make(8, 1.5, 2, AttentionMode::spatial_only),
                                 {2, 2, 1});
  Rng rng(16);
  auto x = random_tensor({4, 8}, rng);
  EXPECT_LT(max_abs_diff(joint(x).values(), spatial(x).values()), 1e-15);
}

TEST(AttentionModes, CascadedWithSilentSliceStageEqualsSpatial) {
  ParamStore<double> s1(17), s2(17);
  const Triple grid{2, 2, 3};
  AttentionLayer<double> cascaded(
      s1, "attn", AttentionConfig::make(8, 1.5, 2, AttentionMode::split_cascaded), grid);
  AttentionLayer<double> spatial(
      s2, "attn", AttentionConfig::make(8, 1.5, 2, AttentionMode::spatial_only), grid);
  fill(s1.at("attn_slice.proj.weight"), 0.0);
  Rng rng(18);
  auto x = random_tensor({12, 8}, rng);
  EXPECT_EQ(cascaded(x).values(), spatial(x).values());
}

TEST(AttentionModes, ShapePreservedAndGroupSizes) {
  const Triple grid{2, 3, 2};
  for (auto mode : {AttentionMode::joint, AttentionMode::spatial_only,
                    AttentionMode::split_cascaded, AttentionMode::split_parallel}) {
    ParamStore<double> store(19);
    AttentionLayer<double> attn(store, "attn", AttentionConfig::make(8, 1.5, 2, mode), grid);
    Rng rng(20);
    AttentionProbe<double> probe;
    auto y = attn(random_tensor({12, 8}, rng), &probe);
    EXPECT_EQ(y.shape(), (Shape{12, 8})) << to_string(mode);
    // groups*heads x M x M weights per stage
    for (const auto& [name, w] : probe.weights) {
      const bool slice = name == "attn_slice";
      const bool joint = mode == AttentionMode::joint;
      const Index m = joint ? 12 : slice ? 2 : 6;
      EXPECT_EQ(w.shape(), (Shape{2 * 12 / m, m, m})) << to_string(mode) << " " << name;
    }
    EXPECT_EQ(probe.weights.size(), attn.split() ? 2u : 1u);
  }
}

TEST(AttentionModes, SpatialAttentionStaysWithinSlice) {
  // changing a token in slice 0 must not move outputs in slice 1
  ParamStore<double> store(21);
  const Triple grid{2, 2, 2};
  AttentionLayer<double> attn(store, "attn",
                              AttentionConfig::make(8, 1.0, 2, AttentionMode::spatial_only), grid);
  set_delta_kernels(store.at("attn.dwconv.weight"));
  Rng rng(22);
  auto x = random_tensor({8, 8}, rng);
  auto y0 = attn(x);
  auto x2 = x.detach();
  x2.data()[0] += 1.0;  // token (0,0,0), slice d'=0
  auto y1 = attn(x2);
  for (Index n = 0; n < 8; ++n) {
    const bool same_slice = n % 2 == 0;
    double diff = 0.0;
    for (Index j = 0; j < 8; ++j) diff += std::abs(y1.values()[n * 8 + j] - y0.values()[n * 8 + j]);
    if (same_slice) {
      EXPECT_GT(diff, 0.0) << n;
    } else {
      EXPECT_EQ(diff, 0.0) << n;
    }
  }
}

TEST(AttentionProperty, RowsSumToOneAcrossModes) {
  Rng rng(23);
  int cases = 0;
  const AttentionMode modes[] = {AttentionMode::joint, AttentionMode::spatial_only,
                                 AttentionMode::split_cascaded, AttentionMode::split_parallel};
  for (int trial = 0; trial < 30; ++trial) {
    const Triple grid{static_cast<Index>(1 + rng.below(3)), static_cast<Index>(1 + rng.below(3)),
                      static_cast<Index>(1 + rng.below(3))};
    const Index heads = 1 + static_cast<Index>(rng.below(3));
    const Index d = heads * (2 + static_cast<Index>(rng.below(3)));
    for (auto mode : modes) {
      ParamStore<double> store(rng.next_u64());
      AttentionLayer<double> attn(store, "attn", AttentionConfig::make(d, 2.0, heads, mode),
                                  grid);
      const double spread = rng.uniform(0.5, 20.0);
      auto x = random_tensor({grid[0] * grid[1] * grid[2], d}, rng, false, -spread, spread);
      AttentionProbe<double> probe;
      attn(x, &probe);
      for (const auto& [name, w] : probe.weights) {
        const Index m = w.dim(2);
        for (Index r = 0; r < w.numel() / m; ++r) {
          double s = 0.0;
          for (Index j = 0; j < m; ++j) {
            const double p = w.values()[r * m + j];
            ASSERT_GE(p, 0.0);
            ASSERT_LE(p, 1.0);
            s += p;
          }
          ASSERT_NEAR(s, 1.0, 1e-9) << to_string(mode) << " " << name;
        }
      }
      ++cases;
    }
  }
  EXPECT_GE(cases, 100);
}

// Transformer block --------------------------------------------------------------

TEST(TransformerBlock, ZeroedBranchesAreIdentity) {
  ParamStore<double> store(24);
  TransformerBlock<double> block(store, "block",
                                 AttentionConfig::make(16, 1.5, 2, AttentionMode::joint),
                                 {2, 2, 2}, 64);
  for (const char* p : {"block.attn.q.weight", "block.attn.k.weight", "block.attn.v.weight",
                        "block.ffn.fc1.weight", "block.ffn.fc2.weight"}) {
    fill(store.at(p), 0.0);
  }
  Rng rng(25);
  auto z = random_tensor({8, 16}, rng);
  EXPECT_EQ(block(z).values(), z.values());
}

TEST(TransformerBlock, ShapeForVariousGrids) {
  for (Triple grid : {Triple{1, 1, 1}, Triple{2, 1, 3}, Triple{3, 3, 2}}) {
    ParamStore<double> store(26);
    TransformerBlock<double> block(
        store, "block", AttentionConfig::make(8, 1.5, 2, AttentionMode::split_parallel), grid,
        16);
    Rng rng(27);
    const Index n = grid[0] * grid[1] * grid[2];
    EXPECT_EQ(block(random_tensor({n, 8}, rng)).shape(), (Shape{n, 8}));
  }
}

// Deformable conv / DBM ------------------------------------------------------------

TEST(DeformableConv, ZeroOffsetsEqualConv) {
  Rng rng(28);
  auto x = random_tensor({3, 5, 4, 6}, rng);
  auto w = random_tensor({4, 3, 3, 3, 3}, rng);
  auto b = random_tensor({4}, rng);
  auto y = deformable_conv3d(x, w, b, Tensor<double>::zeros({81, 5, 4, 6}), 3);
  auto ref = conv3d(x, w, b, ConvSpec::same(3));
  EXPECT_LT(max_abs_diff(y.values(), ref.values()), 1e-12);
}

TEST(DeformableConv, UnitDepthOffsetEqualsShiftedConv) {
  Rng rng(29);
  const Index C = 2, H = 4, W = 3, D = 5;
  auto x = random_tensor({C, H, W, D}, rng);
  auto w = random_tensor({3, C, 3, 3, 3}, rng);
  auto off = Tensor<double>::zeros({81, H, W, D});
  for (Index tap = 0; tap < 27; ++tap) {
    for (Index v = 0; v < H * W * D; ++v) off.data()[(3 * tap + 2) * H * W * D + v] = 1.0;
  }
  auto y = deformable_conv3d(x, w, Tensor<double>(), off, 3);
  // x shifted one voxel along depth, zero at the far end
  auto shifted = Tensor<double>::zeros({C, H, W, D});
  for (Index i = 0; i < C * H * W; ++i) {
    for (Index d = 0; d + 1 < D; ++d) shifted.data()[i * D + d] = x.values()[i * D + d + 1];
  }
  auto ref = conv3d(shifted, w, ConvSpec::same(3));
  // at depth 0 the regular conv reads padding where the shifted sample reads x
  for (Index co = 0; co < 3; ++co)
    for (Index h = 0; h < H; ++h)
      for (Index ww = 0; ww < W; ++ww)
        for (Index d = 1; d < D; ++d) {
          const Index i = ((co * H + h) * W + ww) * D + d;
          EXPECT_NEAR(y.values()[i], ref.values()[i], 1e-12);
        }
}

TEST(DeformableConv, OffsetChannelCountIsChecked) {
  auto x = Tensor<double>::zeros({2, 3, 3, 3});
  auto w = Tensor<double>::zeros({2, 2, 3, 3, 3});
  EXPECT_THROW(deformable_conv3d(x, w, Tensor<double>(), Tensor<double>::zeros({80, 3, 3, 3}), 3),
               ConfigError);
  EXPECT_THROW(deformable_conv3d(x, w, Tensor<double>(), Tensor<double>::zeros({81, 3, 3, 2}), 3),
               ShapeError);
}

TEST(DeformableConv, OffsetGradientMatchesFiniteDifferences) {
  Rng rng(30);
  auto x = random_tensor({2, 3, 3, 3}, rng, true);
  auto w = random_tensor({2, 2, 3, 3, 3}, rng, true);
  auto off = random_tensor({81, 3, 3, 3}, rng, true, -0.45, 0.45);
  auto report = grad_check(
      [](const auto& v) { return deformable_conv3d(v[0], v[1], Tensor<double>(), v[2], 3); },
      {{"input", x}, {"weight", w}, {"offsets", off}});
  for (const auto& e : report.entries) EXPECT_TRUE(e.passed) << e.name << " " << e.max_rel_error;
}

TEST(Dbm, ZeroWeightsGiveIdentity) {
  ParamStore<double> store(31);
  Dbm<double> dbm(store, "dbm", DbmConfig{8, 4, 3});
  for (const auto& e : store.entries()) fill(e.value, 0.0);
  Rng rng(32);
  auto x = random_tensor({8, 4, 4, 4}, rng);
  EXPECT_EQ(dbm(x).values(), x.values());
}

TEST(Dbm, ShapePreservedAndConfigChecked) {
  for (Index c : {8, 12, 16}) {
    ParamStore<double> store(33);
    Dbm<double> dbm(store, "dbm", DbmConfig{c, 4, 3});
    Rng rng(34);
    EXPECT_EQ(dbm(random_tensor({c, 3, 2, 3}, rng)).shape(), (Shape{c, 3, 2, 3}));
    EXPECT_EQ(store.at("dbm.offset.weight").dim(0), 81);
  }
  ParamStore<double> store(35);
  EXPECT_THROW(Dbm<double>(store, "dbm", DbmConfig{10, 4, 3}), ConfigError);
  EXPECT_THROW(Dbm<double>(store, "dbm2", DbmConfig{8, 4, 2}), ConfigError);
}

TEST(Dbm, OffsetConvStartsAtZero) {
  ParamStore<double> store(36);
  Dbm<double> dbm(store, "dbm", DbmConfig{8, 4, 3});
  for (double v : store.at("dbm.offset.weight").values()) EXPECT_EQ(v, 0.0);
}

// Decoder ----------------------------------------------------------------------

TEST(Decoder, ZeroWeightsGiveZeroLogits) {
  ParamStore<double> store(37);
  Decoder<double> dec(store, "decoder", {4, 8, 16}, 3, DbmConfig{4, 2, 3});
  for (const auto& e : store.entries()) fill(e.value, 0.0);
  Rng rng(38);
  auto y = dec(random_tensor({16, 2, 2, 2}, rng),
               {random_tensor({4, 8, 8, 8}, rng), random_tensor({8, 4, 4, 4}, rng)});
  EXPECT_EQ(y.shape(), (Shape{3, 8, 8, 8}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Decoder, SkipCountMismatchIsConfigError) {
  ParamStore<double> store(39);
  Decoder<double> dec(store, "decoder", {4, 8, 16}, 3, std::nullopt);
  Rng rng(40);
  EXPECT_THROW(dec(random_tensor({16, 2, 2, 2}, rng), {random_tensor({8, 4, 4, 4}, rng)}),
               ConfigError);
}

// Parameters ---------------------------------------------------------------------

TEST(ParamStore, NamesAreUniqueAndInitMatchesKind) {
  ParamStore<double> store(41);
  Conv3dLayer<double> conv(store, "conv", 4, 8, ConvSpec::same(3));
  EXPECT_THROW(store.add("conv.weight", {1}, Init::zeros()), std::logic_error);
  for (double v : conv.bias().values()) EXPECT_EQ(v, 0.0);
  // Kaiming: sample std close to sqrt(2 / fan_in)
  const auto& w = conv.weight().values();
  double ss = 0.0;
  for (double v : w) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(w.size())), std::sqrt(2.0 / (4 * 27)), 0.01);
}

TEST(ParamStore, ValuesDependOnNameAndSeedOnly) {
  ParamStore<double> a(42), b(42);
  a.add("x", {3}, Init::normal(1.0));
  auto ya = a.add("y", {3}, Init::normal(1.0));
  auto yb = b.add("y", {3}, Init::normal(1.0));
  EXPECT_EQ(ya.values(), yb.values());
  ParamStore<float> f(42);
  auto yf = f.add("y", {3}, Init::normal(1.0));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(yf.values()[i], static_cast<float>(ya.values()[i]));
}
