#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "volseg/core/errors.hpp"
#include "volseg/core/tensor.hpp"

namespace volseg {

/// `key = value` document, one entry per line, `#` comments. Readers mark
/// the keys they use; leftovers are reported as unknown fields.
class KeyValueDoc {
 public:
  static KeyValueDoc parse(const std::string& text, const std::string& source = "<config>") {
    KeyValueDoc doc;
    doc.source_ = source;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
      }
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
      if (doc.values_.count(key)) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      }
      doc.order_.push_back(key);
      doc.values_.emplace(std::move(key), std::move(value));
    }
    return doc;
  }

  static KeyValueDoc load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path);
  }

  void set(const std::string& key, std::string value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = std::move(value);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  const std::string* find(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return nullptr;
    consumed_.insert(key);
    return &it->second;
  }

  std::string get_string(const std::string& key, const std::string& fallback) {
    const auto* v = find(key);
    return v ? *v : fallback;
  }

  Index get_int(const std::string& key, Index fallback) {
    const auto* v = find(key);
    return v ? to_int(key, *v) : fallback;
  }

  double get_double(const std::string& key, double fallback) {
    const auto* v = find(key);
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      const double d = std::stod(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing");
      return d;
    } catch (const std::exception&) {
      throw field_error(key, "expected a number, got '" + *v + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) {
    const auto* v = find(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1") return true;
    if (*v == "false" || *v == "0") return false;
    throw field_error(key, "expected true or false, got '" + *v + "'");
  }

  std::vector<Index> get_ints(const std::string& key, std::vector<Index> fallback) {
    const auto* v = find(key);
    if (!v) return fallback;
    std::vector<Index> out;
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_int(key, trim(item)));
    if (out.empty()) throw field_error(key, "expected a comma-separated list");
    return out;
  }

  /// Keys never read, in document order.
  std::vector<std::string> unconsumed() const {
    std::vector<std::string> out;
    for (const auto& k : order_) {
      if (!consumed_.count(k)) out.push_back(k);
    }
    return out;
  }

  void require_all_consumed() const {
    auto left = unconsumed();
    if (left.empty()) return;
    std::string msg = source_ + ": unknown field";
    msg += left.size() > 1 ? "s" : "";
    for (std::size_t i = 0; i < left.size(); ++i) msg += (i ? ", '" : " '") + left[i] + "'";
    throw ConfigError(msg);
  }

  std::string str() const {
    std::string out;
    for (const auto& k : order_) out += k + " = " + values_.at(k) + "\n";
    return out;
  }

  ConfigError field_error(const std::string& key, const std::string& what) const {
    return ConfigError(source_ + ": field '" + key + "': " + what);
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  Index to_int(const std::string& key, const std::string& text) const {
    Index value = 0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) {
      throw field_error(key, "expected an integer, got '" + text + "'");
    }
    return value;
  }

  std::string source_;
  std::vector<std::string> order_;
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

}  // namespace volseg
