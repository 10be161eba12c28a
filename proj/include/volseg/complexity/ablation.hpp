#pragma once

#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "volseg/complexity/analyzer.hpp"

namespace volseg {

struct AblationRow {
  AblationVariant variant;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::int64_t delta_params = 0;  // vs the previous rung
  std::int64_t delta_flops = 0;
};

/// Extra query/key weights from widening d to d_m in every block.
inline std::uint64_t qk_expand_param_delta(const ModelConfig& cfg) {
  const auto a = cfg.attention();
  return static_cast<std::uint64_t>(cfg.depth * 2 * a.dim * (a.qk_dim - a.dim));
}

/// Params and FLOPs for the five cumulative variants B .. full.
inline std::vector<AblationRow> ablation_ladder(const Triple& input_size,
                                                Convention convention = Convention::mac,
                                                std::uint64_t seed = 0) {
  std::vector<AblationRow> out;
  for (auto v : kAblationLadder) {
    auto model = build_ablation<float>(v, seed, input_size);
    const auto report = count_flops(model, model.input_shape(), convention);
    AblationRow row{v, report.total_params(), report.total_flops()};
    if (!out.empty()) {
      row.delta_params = static_cast<std::int64_t>(row.params) -
                         static_cast<std::int64_t>(out.back().params);
      row.delta_flops =
          static_cast<std::int64_t>(row.flops) - static_cast<std::int64_t>(out.back().flops);
    }
    out.push_back(row);
  }
  return out;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  o << std::left << std::setw(16) << "variant" << std::right << std::setw(12) << "params"
    << std::setw(10) << "(M)" << std::setw(12) << "d params" << std::setw(16) << "flops"
    << std::setw(10) << "(G)" << std::setw(16) << "d flops" << "\n";
  for (const auto& r : rows) {
    o << std::left << std::setw(16) << to_string(r.variant) << std::right << std::setw(12)
      << r.params << std::setw(10) << format_fixed(r.params / 1e6, 2) << std::setw(12)
      << r.delta_params << std::setw(16) << r.flops << std::setw(10)
      << format_fixed(r.flops / 1e9, 2) << std::setw(16) << r.delta_flops << "\n";
  }
  return o.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  o << "variant,params,delta_params,flops,delta_flops\n";
  for (const auto& r : rows) {
    o << to_string(r.variant) << ',' << r.params << ',' << r.delta_params << ',' << r.flops << ','
      << r.delta_flops << "\n";
  }
  return o.str();
}

inline nlohmann::ordered_json ablation_json(const std::vector<AblationRow>& rows) {
  auto j = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    j.push_back({{"variant", to_string(r.variant)},
                 {"params", r.params},
                 {"delta_params", r.delta_params},
                 {"flops", r.flops},
                 {"delta_flops", r.delta_flops}});
  }
  return j;
}

}  // namespace volseg
