#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "volseg/model/model.hpp"

namespace volseg {

inline constexpr const char* kCheckpointMagic = "VOLSEG-CKPT";
inline constexpr int kCheckpointVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 8 ? "f64" : "f32";
}

struct CheckpointEntry {
  std::string name;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
  Shape shape;
};

/// Parsed manifest plus raw payload.
struct CheckpointData {
  std::string dtype;
  std::uint64_t seed = 0;
  KeyValueDoc config;
  std::vector<CheckpointEntry> entries;
  std::string digest;
  std::vector<unsigned char> payload;

  std::size_t scalar_size() const { return dtype == "f64" ? 8 : 4; }
};

inline std::string hex_digest(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << h;
  return o.str();
}

namespace detail {

template <typename S>
void put_le(std::vector<unsigned char>& out, S value) {
  unsigned char b[sizeof(S)];
  std::memcpy(b, &value, sizeof(S));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(S));
  out.insert(out.end(), b, b + sizeof(S));
}

template <typename S>
S get_le(const unsigned char* p) {
  unsigned char b[sizeof(S)];
  std::memcpy(b, p, sizeof(S));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(S));
  S value;
  std::memcpy(&value, b, sizeof(S));
  return value;
}

inline std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape_field(const std::string& text) {
  Shape s;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, 'x')) s.push_back(std::stoll(item));
  return s;
}

}  // namespace detail

/// Serialises the model's parameters (in its own precision), seed and
/// config. The result is byte-identical for identical parameter values.
template <typename T>
std::string checkpoint_bytes(const Model<T>& model) {
  std::vector<unsigned char> payload;
  std::ostringstream manifest;
  manifest << kCheckpointMagic << ' ' << kCheckpointVersion << "\n";
  manifest << "dtype " << dtype_name<T>() << "\n";
  manifest << "seed " << model.params().seed() << "\n";
  std::istringstream cfg(model.config().to_doc().str());
  for (std::string line; std::getline(cfg, line);) manifest << "config " << line << "\n";
  for (const auto& e : model.params().entries()) {
    const std::uint64_t offset = payload.size();
    for (T v : e.value.values()) detail::put_le(payload, v);
    manifest << "param " << e.name << ' ' << offset << ' ' << payload.size() - offset << ' '
             << detail::shape_field(e.value.shape()) << "\n";
  }
  manifest << "digest " << hex_digest(payload.data(), payload.size()) << "\n";
  manifest << "payload " << payload.size() << "\n";
  std::string out = manifest.str();
  out.append(reinterpret_cast<const char*>(payload.data()), payload.size());
  return out;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  const std::string bytes = checkpoint_bytes(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to checkpoint " + path);
}

inline CheckpointData parse_checkpoint(const std::string& bytes, const std::string& source) {
  CheckpointData data;
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw CheckpointError(source + ": truncated manifest");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  {
    std::istringstream head(next_line());
    std::string magic;
    int version = 0;
    head >> magic >> version;
    if (magic != kCheckpointMagic) throw CheckpointError(source + ": not a volseg checkpoint");
    if (version != kCheckpointVersion) {
      throw CheckpointError(source + ": checkpoint version " + std::to_string(version) +
                            ", expected " + std::to_string(kCheckpointVersion));
    }
  }
  std::string config_text;
  std::uint64_t payload_size = 0;
  bool have_payload = false;
  while (!have_payload) {
    const std::string line = next_line();
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (key == "dtype") {
      data.dtype = rest;
      if (rest != "f32" && rest != "f64") {
        throw CheckpointError(source + ": unknown dtype '" + rest + "'");
      }
    } else if (key == "seed") {
      data.seed = std::stoull(rest);
    } else if (key == "config") {
      config_text += rest + "\n";
    } else if (key == "param") {
      std::istringstream f(rest);
      CheckpointEntry e;
      std::string shape;
      if (!(f >> e.name >> e.offset >> e.nbytes >> shape)) {
        throw CheckpointError(source + ": malformed manifest line '" + line + "'");
      }
      e.shape = detail::parse_shape_field(shape);
      data.entries.push_back(std::move(e));
    } else if (key == "digest") {
      data.digest = rest;
    } else if (key == "payload") {
      payload_size = std::stoull(rest);
      have_payload = true;
    } else {
      throw CheckpointError(source + ": unexpected manifest line '" + line + "'");
    }
  }
  if (data.dtype.empty()) throw CheckpointError(source + ": manifest lacks a dtype");
  if (bytes.size() - pos != payload_size) {
    throw CheckpointError(source + ": payload is " + std::to_string(bytes.size() - pos) +
                          " bytes, manifest says " + std::to_string(payload_size));
  }
  data.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  if (hex_digest(data.payload.data(), data.payload.size()) != data.digest) {
    throw CheckpointError(source + ": payload digest mismatch (corrupt checkpoint)");
  }
  for (const auto& e : data.entries) {
    if (e.offset + e.nbytes > payload_size ||
        e.nbytes != static_cast<std::uint64_t>(numel(e.shape)) * data.scalar_size()) {
      throw CheckpointError(source + ": entry '" + e.name + "' does not fit the payload");
    }
  }
  data.config = KeyValueDoc::parse(config_text, source + " (config)");
  return data;
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str(), path);
}

/// Copies checkpoint values into `model`, converting precision if needed.
/// Name or shape disagreements are reported together before anything is
/// written.
template <typename T>
void load_checkpoint(Model<T>& model, const CheckpointData& data,
                     const std::string& source = "checkpoint") {
  std::map<std::string, const CheckpointEntry*> found;
  for (const auto& e : data.entries) found.emplace(e.name, &e);
  std::vector<std::string> missing, mismatched;
  std::map<std::string, bool> expected;
  for (const auto& p : model.params().entries()) {
    expected[p.name] = true;
    auto it = found.find(p.name);
    if (it == found.end()) {
      missing.push_back(p.name);
    } else if (it->second->shape != p.value.shape()) {
      mismatched.push_back(p.name + " (model " + detail::shape_field(p.value.shape()) +
                           ", checkpoint " + detail::shape_field(it->second->shape) + ")");
    }
  }
  std::vector<std::string> unexpected;
  for (const auto& e : data.entries) {
    if (!expected.count(e.name)) unexpected.push_back(e.name);
  }
  if (!missing.empty() || !unexpected.empty() || !mismatched.empty()) {
    std::string msg = source + " does not match the model";
    auto list = [&](const char* what, const std::vector<std::string>& names) {
      if (names.empty()) return;
      msg += "\n  " + std::string(what) + " (" + std::to_string(names.size()) + "):";
      for (const auto& n : names) msg += "\n    " + n;
    };
    list("missing parameters", missing);
    list("unexpected parameters", unexpected);
    list("shape mismatches", mismatched);
    throw CheckpointError(msg);
  }
  const bool f64 = data.dtype == "f64";
  for (const auto& p : model.params().entries()) {
    const auto* e = found.at(p.name);
    Tensor<T> t = p.value;
    auto dst = t.data();
    const unsigned char* src = data.payload.data() + e->offset;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] = f64 ? static_cast<T>(detail::get_le<double>(src + 8 * i))
                   : static_cast<T>(detail::get_le<float>(src + 4 * i));
    }
  }
}

template <typename T>
void load_checkpoint(Model<T>& model, const std::string& path) {
  load_checkpoint(model, read_checkpoint(path), path);
}

/// The model config stored in a checkpoint.
inline ModelConfig checkpoint_config(const CheckpointData& data) {
  KeyValueDoc doc = data.config;
  auto cfg = ModelConfig::from_doc(doc);
  doc.require_all_consumed();
  return cfg;
}

}  // namespace volseg
