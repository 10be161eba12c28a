#pragma once

#include <cstdio>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "volseg/complexity/report.hpp"
#include "volseg/model/model.hpp"

namespace volseg {

inline constexpr const char* kSections[] = {"encoder", "transformer", "dbm", "decoder"};

struct ComplexityReport {
  std::string model;
  Shape input_shape;
  Convention convention = Convention::mac;
  bool include_aux = false;
  std::vector<LayerRow> rows;

  std::uint64_t total_params() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.params;
    return t;
  }
  std::uint64_t total_macs() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.macs;
    return t;
  }
  std::uint64_t total_aux() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.aux;
    return t;
  }
  std::uint64_t row_flops(const LayerRow& r) const {
    const std::uint64_t ops = r.macs + (include_aux ? r.aux : 0);
    return convention == Convention::flops2 ? 2 * ops : ops;
  }
  /// Per-case FLOPs under the report's convention.
  std::uint64_t total_flops() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += row_flops(r);
    return t;
  }
  Index depth() const { return input_shape.empty() ? 1 : input_shape.back(); }
  /// Per-slice FLOPs: quotient and remainder of per-case / D.
  std::uint64_t per_slice() const { return total_flops() / static_cast<std::uint64_t>(depth()); }
  std::uint64_t per_slice_remainder() const {
    return total_flops() % static_cast<std::uint64_t>(depth());
  }

  std::uint64_t section_params(const std::string& section) const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.section == section ? r.params : 0;
    return t;
  }
  std::uint64_t section_flops(const std::string& section) const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.section == section ? row_flops(r) : 0;
    return t;
  }
};

template <typename T>
ComplexityReport count_flops(const Model<T>& model, const Shape& input_shape,
                             Convention convention = Convention::mac, bool include_aux = false) {
  ComplexityReport r;
  r.model = model.config().name;
  r.input_shape = input_shape;
  r.convention = convention;
  r.include_aux = include_aux;
  r.rows = model.account(input_shape);
  return r;
}

/// Parameter-only report: the FLOP columns are zeroed.
template <typename T>
ComplexityReport count_params(const Model<T>& model) {
  auto r = count_flops(model, model.input_shape());
  for (auto& row : r.rows) row.macs = row.aux = 0;
  return r;
}

struct Reduction {
  double params_percent = 0.0;
  double flops_percent = 0.0;
};

/// (a - b) / a for params and FLOPs, in percent.
inline Reduction compare(const ComplexityReport& a, const ComplexityReport& b) {
  if (a.convention != b.convention || a.include_aux != b.include_aux) {
    throw ConfigError("refusing to compare reports with different FLOP conventions (" +
                      std::string(to_string(a.convention)) + " vs " +
                      std::string(to_string(b.convention)) + ")");
  }
  if (a.input_shape != b.input_shape) {
    throw ConfigError("refusing to compare reports for different input shapes " +
                      to_string(a.input_shape) + " vs " + to_string(b.input_shape));
  }
  auto pct = [](double x, double y) { return x == 0.0 ? 0.0 : (x - y) / x * 100.0; };
  return {pct(static_cast<double>(a.total_params()), static_cast<double>(b.total_params())),
          pct(static_cast<double>(a.total_flops()), static_cast<double>(b.total_flops()))};
}

// Output formats --------------------------------------------------------

inline std::string format_fixed(double v, int digits) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

inline std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline std::string report_table(const ComplexityReport& r, bool with_rows = true) {
  std::ostringstream o;
  o << "model " << r.model << "  input " << shape_text(r.input_shape) << "  convention "
    << to_string(r.convention) << (r.include_aux ? "+aux" : "") << "\n";
  if (with_rows) {
    o << std::left << std::setw(48) << "layer" << std::setw(12) << "section" << std::right
      << std::setw(12) << "params" << std::setw(16) << "flops" << "\n";
    for (const auto& row : r.rows) {
      if (row.params == 0 && r.row_flops(row) == 0) continue;
      o << std::left << std::setw(48) << row.name << std::setw(12) << row.section << std::right
        << std::setw(12) << row.params << std::setw(16) << r.row_flops(row) << "\n";
    }
  }
  for (const char* s : kSections) {
    o << "section " << std::left << std::setw(12) << s << std::right << " params "
      << std::setw(12) << r.section_params(s) << "  flops " << std::setw(16)
      << r.section_flops(s) << "\n";
  }
  o << "params       " << r.total_params() << " (" << format_fixed(r.total_params() / 1e6, 2)
    << "M)\n";
  o << "flops/case   " << r.total_flops() << " (" << format_fixed(r.total_flops() / 1e9, 2)
    << "G)\n";
  o << "flops/slice  " << r.per_slice() << " (" << format_fixed(r.per_slice() / 1e9, 2) << "G)";
  if (r.per_slice_remainder()) o << " remainder " << r.per_slice_remainder();
  o << "\n";
  return o.str();
}

/// CSV with one line per row and a trailing TOTAL line.
inline std::string report_csv(const ComplexityReport& r) {
  std::ostringstream o;
  o << "layer,section,kind,params,macs,aux,flops,output\n";
  for (const auto& row : r.rows) {
    o << row.name << ',' << row.section << ',' << row.kind << ',' << row.params << ','
      << row.macs << ',' << row.aux << ',' << r.row_flops(row) << ',' << shape_text(row.output)
      << "\n";
  }
  o << "TOTAL,,," << r.total_params() << ',' << r.total_macs() << ',' << r.total_aux() << ','
    << r.total_flops() << ',' << shape_text(r.input_shape) << "\n";
  return o.str();
}

inline nlohmann::ordered_json report_json(const ComplexityReport& r) {
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["input_shape"] = r.input_shape;
  j["convention"] = to_string(r.convention);
  j["include_aux"] = r.include_aux;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"name", row.name},
                    {"section", row.section},
                    {"kind", row.kind},
                    {"params", row.params},
                    {"macs", row.macs},
                    {"aux", row.aux},
                    {"flops", r.row_flops(row)},
                    {"output", row.output}});
  }
  j["rows"] = std::move(rows);
  nlohmann::ordered_json sections;
  for (const char* s : kSections) {
    sections[s] = {{"params", r.section_params(s)}, {"flops", r.section_flops(s)}};
  }
  j["sections"] = std::move(sections);
  j["totals"] = {{"params", r.total_params()},
                 {"macs", r.total_macs()},
                 {"aux", r.total_aux()},
                 {"flops", r.total_flops()}};
  j["per_slice"] = r.per_slice();
  j["per_slice_remainder"] = r.per_slice_remainder();
  return j;
}

}  // namespace volseg
