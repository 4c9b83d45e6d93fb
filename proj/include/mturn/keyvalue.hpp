// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mturn/core.hpp"

namespace mturn {

// Flat `key = value` document. Lines starting with '#' are comments.
// `include = path` splices another document (path relative to the including
// file); later assignments override earlier ones.
class KeyValueDocument {
 public:
  KeyValueDocument() = default;

  static KeyValueDocument parse(std::string_view text,
                                const std::filesystem::path& base_dir = {}) {
    KeyValueDocument doc;
    doc.parse_into(text, base_dir, 0);
    return doc;
  }

  static KeyValueDocument load(const std::filesystem::path& path) {
    KeyValueDocument doc;
    doc.load_into(path, 0);
    return doc;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool contains(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
    return it->second;
  }
  std::string get_string(const std::string& key, const std::string& fallback) const {
    return contains(key) ? get_string(key) : fallback;
  }

  double get_double(const std::string& key) const { return parse_double(key, get_string(key)); }
  double get_double(const std::string& key, double fallback) const {
    return contains(key) ? get_double(key) : fallback;
  }

  long long get_int(const std::string& key) const { return parse_int(key, get_string(key)); }
  long long get_int(const std::string& key, long long fallback) const {
    return contains(key) ? get_int(key) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!contains(key)) return fallback;
    const std::string v = get_string(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "' expects a boolean, got '" + v + "'");
  }

  std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get_string(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  // Rejects keys outside `allowed`. A trailing '*' in an allowed entry
  // accepts any key with that prefix.
  void reject_unknown(const std::set<std::string>& allowed) const {
    for (const auto& [key, value] : values_) {
      if (allowed.count(key)) continue;
      const bool prefixed = std::any_of(allowed.begin(), allowed.end(), [&](const std::string& a) {
        return !a.empty() && a.back() == '*' && key.rfind(a.substr(0, a.size() - 1), 0) == 0;
      });
      if (!prefixed) throw ConfigError("unknown key '" + key + "'");
    }
  }

  // Keys with the given prefix, prefix stripped.
  KeyValueDocument section(const std::string& prefix) const {
    KeyValueDocument out;
    for (const auto& [key, value] : values_)
      if (key.rfind(prefix, 0) == 0) out.values_[key.substr(prefix.size())] = value;
    return out;
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
    return out;
  }

  static double parse_double(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
    }
  }

  static long long parse_int(const std::string& key, const std::string& v) {
    long long x = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || ptr != v.data() + v.size())
      throw ConfigError("key '" + key + "' expects an integer, got '" + v + "'");
    return x;
  }

  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

 private:
  void load_into(const std::filesystem::path& path, int depth) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    parse_into(ss.str(), path.parent_path(), depth);
  }

  void parse_into(std::string_view text, const std::filesystem::path& base_dir, int depth) {
    if (depth > 16) throw ConfigError("include nesting too deep");
    std::stringstream ss{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
      const std::string key = trim(std::string_view(t).substr(0, eq));
      const std::string value = trim(std::string_view(t).substr(eq + 1));
      if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
      if (key == "include") {
        load_into(base_dir / value, depth + 1);
      } else {
        values_[key] = value;
      }
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace mturn
