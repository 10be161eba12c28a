#pragma once

#include <charconv>
#include <string>
#include <vector>

#include "volseg/core/keyvalue.hpp"
#include "volseg/nn/attention.hpp"
#include "volseg/nn/deform.hpp"

namespace volseg {

inline constexpr Index kConfigSchemaVersion = 1;

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string join_ints(const std::vector<Index>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

enum class AblationVariant { B, B_TR, B_TR_FEM, B_TR_FEM_DBM, full };

inline constexpr AblationVariant kAblationLadder[] = {
    AblationVariant::B, AblationVariant::B_TR, AblationVariant::B_TR_FEM,
    AblationVariant::B_TR_FEM_DBM, AblationVariant::full};

inline std::string_view to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::B: return "B";
    case AblationVariant::B_TR: return "B+TR";
    case AblationVariant::B_TR_FEM: return "B+TR+FEM";
    case AblationVariant::B_TR_FEM_DBM: return "B+TR+FEM+DBM";
    case AblationVariant::full: return "full";
  }
  return "?";
}

inline AblationVariant parse_ablation_variant(std::string_view text) {
  for (auto v : kAblationLadder) {
    if (to_string(v) == text) return v;
  }
  throw ConfigError("unknown ablation variant '" + std::string(text) +
                    "' (expected B, B+TR, B+TR+FEM, B+TR+FEM+DBM or full)");
}

struct ModelConfig {
  std::string name = "transbtsv2";
  Index in_channels = 4;
  Index num_classes = 4;
  Triple input_size{128, 128, 128};
  std::vector<Index> stage_channels{16, 32, 64, 128};  // last entry is K
  std::vector<Index> encoder_blocks{1, 1, 2, 4};
  Index embed_dim = 512;  // d
  double expansion = 1.5;  // E
  Index depth = 1;         // L
  Index ffn_ratio = 4;
  Index heads = 8;
  Index restore_mid_channels = 192;
  Index deform_kernel = 3;  // S
  Index dbm_reduction = 4;
  AttentionMode attention_mode = AttentionMode::joint;
  bool use_transformer = true;
  bool use_fem = true;
  bool use_dbm = true;
  bool use_qk_expand = true;

  Index channels_k() const { return stage_channels.back(); }
  Index overall_stride() const { return Index{1} << (stage_channels.size() - 1); }

  Triple token_grid() const {
    const Index os = overall_stride();
    return {input_size[0] / os, input_size[1] / os, input_size[2] / os};
  }
  Index tokens() const {
    const auto g = token_grid();
    return g[0] * g[1] * g[2];
  }

  /// Transformer width: d with the expansion module, K without it.
  Index transformer_dim() const { return use_fem ? embed_dim : channels_k(); }

  AttentionConfig attention() const {
    return AttentionConfig::make(transformer_dim(), expansion, heads, attention_mode,
                                 use_qk_expand);
  }

  DbmConfig dbm() const { return {stage_channels.front(), dbm_reduction, deform_kernel}; }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& what) {
      throw ConfigError("field '" + field + "': " + what);
    };
    if (in_channels < 1) fail("in_channels", "must be positive");
    if (num_classes < 2) fail("num_classes", "must be at least 2");
    if (stage_channels.size() < 2) fail("stage_channels", "needs at least two levels");
    if (encoder_blocks.size() != stage_channels.size()) {
      fail("encoder_blocks", "needs one entry per stage");
    }
    for (Index c : stage_channels) {
      if (c < 1) fail("stage_channels", "entries must be positive");
    }
    for (Index b : encoder_blocks) {
      if (b < 0) fail("encoder_blocks", "entries must be non-negative");
    }
    for (int a = 0; a < 3; ++a) {
      if (input_size[a] < 1 || input_size[a] % overall_stride() != 0) {
        fail("input_size", "extent " + std::to_string(input_size[a]) +
                               " is not divisible by the overall stride " +
                               std::to_string(overall_stride()));
      }
    }
    if (use_transformer) {
      if (depth < 1) fail("depth", "L must be >= 1 when the transformer is enabled");
      if (expansion < 1.0) fail("expansion", "E must be >= 1");
      if (ffn_ratio < 1) fail("ffn_ratio", "must be positive");
      if (use_fem && (embed_dim < 1 || restore_mid_channels < 1)) {
        fail("embed_dim", "embed_dim and restore_mid_channels must be positive");
      }
      try {
        attention().validate();
      } catch (const ConfigError& e) {
        fail("heads", e.what());
      }
    }
    if (use_dbm) {
      for (std::size_t i = 0; i + 1 < stage_channels.size(); ++i) {
        if (dbm_reduction < 1 || stage_channels[i] % dbm_reduction != 0) {
          fail("dbm_reduction", "must divide skip width " + std::to_string(stage_channels[i]));
        }
      }
      if (deform_kernel < 1 || deform_kernel % 2 == 0) fail("deform_kernel", "must be odd");
    }
  }

  KeyValueDoc to_doc() const {
    KeyValueDoc doc;
    doc.set("schema_version", std::to_string(kConfigSchemaVersion));
    doc.set("name", name);
    doc.set("in_channels", std::to_string(in_channels));
    doc.set("num_classes", std::to_string(num_classes));
    doc.set("input_size", join_ints({input_size[0], input_size[1], input_size[2]}));
    doc.set("stage_channels", join_ints(stage_channels));
    doc.set("encoder_blocks", join_ints(encoder_blocks));
    doc.set("embed_dim", std::to_string(embed_dim));
    doc.set("expansion", format_double(expansion));
    doc.set("depth", std::to_string(depth));
    doc.set("ffn_ratio", std::to_string(ffn_ratio));
    doc.set("heads", std::to_string(heads));
    doc.set("restore_mid_channels", std::to_string(restore_mid_channels));
    doc.set("deform_kernel", std::to_string(deform_kernel));
    doc.set("dbm_reduction", std::to_string(dbm_reduction));
    doc.set("attention_mode", std::string(to_string(attention_mode)));
    doc.set("use_transformer", use_transformer ? "true" : "false");
    doc.set("use_fem", use_fem ? "true" : "false");
    doc.set("use_dbm", use_dbm ? "true" : "false");
    doc.set("use_qk_expand", use_qk_expand ? "true" : "false");
    return doc;
  }

  /// Reads the model fields (and schema_version); other keys are left for
  /// the caller's unknown-field check.
  static ModelConfig from_doc(KeyValueDoc& doc) {
    const Index version = doc.get_int("schema_version", -1);
    if (version != kConfigSchemaVersion) {
      throw doc.field_error("schema_version",
                            version < 0 ? "missing (expected " +
                                              std::to_string(kConfigSchemaVersion) + ")"
                                        : "unsupported version " + std::to_string(version));
    }
    ModelConfig c;
    c.name = doc.get_string("name", c.name);
    c.in_channels = doc.get_int("in_channels", c.in_channels);
    c.num_classes = doc.get_int("num_classes", c.num_classes);
    auto size = doc.get_ints("input_size", {c.input_size[0], c.input_size[1], c.input_size[2]});
    if (size.size() == 1) size = {size[0], size[0], size[0]};
    if (size.size() != 3) throw doc.field_error("input_size", "expected H,W,D");
    c.input_size = {size[0], size[1], size[2]};
    c.stage_channels = doc.get_ints("stage_channels", c.stage_channels);
    c.encoder_blocks = doc.get_ints("encoder_blocks", c.encoder_blocks);
    c.embed_dim = doc.get_int("embed_dim", c.embed_dim);
    c.expansion = doc.get_double("expansion", c.expansion);
    c.depth = doc.get_int("depth", c.depth);
    c.ffn_ratio = doc.get_int("ffn_ratio", c.ffn_ratio);
    c.heads = doc.get_int("heads", c.heads);
    c.restore_mid_channels = doc.get_int("restore_mid_channels", c.restore_mid_channels);
    c.deform_kernel = doc.get_int("deform_kernel", c.deform_kernel);
    c.dbm_reduction = doc.get_int("dbm_reduction", c.dbm_reduction);
    if (const auto* m = doc.find("attention_mode")) {
      try {
        c.attention_mode = parse_attention_mode(*m);
      } catch (const ConfigError& e) {
        throw doc.field_error("attention_mode", e.what());
      }
    }
    c.use_transformer = doc.get_bool("use_transformer", c.use_transformer);
    c.use_fem = doc.get_bool("use_fem", c.use_fem);
    c.use_dbm = doc.get_bool("use_dbm", c.use_dbm);
    c.use_qk_expand = doc.get_bool("use_qk_expand", c.use_qk_expand);
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;

  // Presets -------------------------------------------------------------

  static ModelConfig transbtsv2() { return {}; }

  /// Deep-narrow reference: L=4, no QK expansion, no DBM, 8d FFN.
  static ModelConfig transbts_v1() {
    ModelConfig c;
    c.name = "transbts_v1";
    c.depth = 4;
    c.expansion = 1.0;
    c.use_qk_expand = false;
    c.use_dbm = false;
    c.ffn_ratio = 8;
    return c;
  }

  /// Toggles applied cumulatively along the ablation ladder.
  static ModelConfig ablation(AblationVariant v) {
    ModelConfig c;
    c.name = std::string("ablation_") + std::string(to_string(v));
    const int rung = static_cast<int>(v);
    c.use_transformer = rung >= 1;
    c.use_fem = rung >= 2;
    c.use_dbm = rung >= 3;
    c.use_qk_expand = rung >= 4;
    return c;
  }

  /// Width-vs-depth pair: (L=8, d=256) and the shallow-wide default.
  static std::pair<ModelConfig, ModelConfig> depth_width_pair() {
    ModelConfig deep;
    deep.name = "deep_narrow";
    deep.depth = 8;
    deep.embed_dim = 256;
    ModelConfig wide;
    wide.name = "shallow_wide";
    return {deep, wide};
  }
};

}  // namespace volseg
