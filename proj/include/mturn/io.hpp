// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "mturn/core.hpp"
#include "mturn/policy.hpp"

namespace mturn {

// Shortest text that parses back to the same double.
inline std::string format_double(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

// Minimal CSV writer: fixed header, one call per row. Fields are numbers or
// identifiers, so no quoting is performed.
class CsvWriter {
 public:
  CsvWriter(std::ostream& os, std::initializer_list<std::string_view> header)
      : os_(os), width_(header.size()) {
    bool first = true;
    for (std::string_view h : header) {
      if (!first) os_ << ',';
      os_ << h;
      first = false;
    }
    os_ << '\n';
  }

  template <class... Fields>
  void row(const Fields&... fields) {
    if (sizeof...(fields) != width_) throw StructuralError("CSV row width does not match header");
    bool first = true;
    ((emit(fields, first)), ...);
    os_ << '\n';
  }

 private:
  template <class T>
  void emit(const T& v, bool& first) {
    if (!first) os_ << ',';
    first = false;
    if constexpr (std::is_floating_point_v<T>) {
      os_ << format_double(static_cast<double>(v));
    } else if constexpr (std::is_same_v<T, bool>) {
      os_ << (v ? "true" : "false");
    } else {
      os_ << v;
    }
  }

  std::ostream& os_;
  std::size_t width_;
};

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Logit checkpoint. Doubles are written in shortest round-trip form, so a
// reload is bit-exact.
inline nlohmann::json policy_to_json(const Policy& policy) {
  return {{"action_logits", policy.action_logits}, {"obs_logits", policy.obs_logits}};
}

inline Policy policy_from_json(const nlohmann::json& j) {
  Policy p;
  try {
    p.action_logits = j.at("action_logits").get<std::vector<double>>();
    if (j.contains("obs_logits")) p.obs_logits = j.at("obs_logits").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
  return p;
}

inline void save_checkpoint(const std::filesystem::path& path, const Policy& policy) {
  std::ofstream out = open_output(path);
  out << policy_to_json(policy).dump() << '\n';
}

inline Policy load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  return policy_from_json(j);
}

}  // namespace mturn
