#ifndef DAREC_CONFIG_HPP_
#define DAREC_CONFIG_HPP_

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "darec/common.hpp"

namespace darec {

// Plain-text configuration documents: one "key = value" per line, '#' starts
// a comment. Consumers read typed values through ConfigDoc and then call
// reject_unknown_keys(); anything left unread is a config error, so typos
// fail loudly instead of silently using defaults.

class ConfigDoc {
 public:
  ConfigDoc() = default;

  static ConfigDoc parse(const std::string& text, const std::string& origin = "<string>") {
    ConfigDoc doc;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      const auto key = trim(trimmed.substr(0, eq));
      const auto value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (doc.values_.count(key))
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      doc.values_[key] = value;
    }
    return doc;
  }

  static ConfigDoc load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  // Required-key getters: missing key is a config error.
  std::string get_string(const std::string& key) {
    require(key);
    return get_string(key, "");
  }
  std::int64_t get_int(const std::string& key) {
    require(key);
    return get_int(key, 0);
  }
  double get_double(const std::string& key) {
    require(key);
    return get_double(key, 0.0);
  }
  bool get_bool(const std::string& key) {
    require(key);
    return get_bool(key, false);
  }
  std::vector<std::string> get_list(const std::string& key) {
    require(key);
    return get_list(key, {});
  }

  std::string get_string(const std::string& key, const std::string& fallback) {
    consumed_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const auto v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected integer, got '" + it->second + "'");
    }
  }

  double get_double(const std::string& key, double fallback) {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const auto v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected number, got '" + it->second + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + it->second + "'");
  }

  /// Comma-separated list value.
  std::vector<std::string> get_list(const std::string& key,
                                    const std::vector<std::string>& fallback) {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::string> out;
    std::istringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto t = trim(item);
      if (!t.empty()) out.push_back(t);
    }
    return out;
  }

  /// Throws listing every key that no consumer asked for.
  void reject_unknown_keys(const std::string& origin = "config") const {
    std::vector<std::string> unknown;
    for (const auto& [key, value] : values_)
      if (!consumed_.count(key)) unknown.push_back(key);
    if (!unknown.empty()) {
      std::string msg = origin + ": unknown key(s):";
      for (const auto& k : unknown) msg += " '" + k + "'";
      throw ConfigError(msg);
    }
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  void require(const std::string& key) const {
    if (!values_.count(key)) throw ConfigError("missing required key '" + key + "'");
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

/// Serializer counterpart: append typed values, emit the document text.
class ConfigWriter {
 public:
  void put(const std::string& key, const std::string& value) {
    lines_.emplace_back(key, value);
  }
  void put(const std::string& key, const char* value) {
    lines_.emplace_back(key, std::string(value));
  }
  void put(const std::string& key, std::int64_t value) {
    lines_.emplace_back(key, std::to_string(value));
  }
  void put(const std::string& key, bool value) {
    lines_.emplace_back(key, value ? "true" : "false");
  }
  void put(const std::string& key, double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    lines_.emplace_back(key, std::string(buf));
  }
  void put_list(const std::string& key, const std::vector<std::string>& items) {
    std::string joined;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (i) joined += ',';
      joined += items[i];
    }
    lines_.emplace_back(key, joined);
  }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : lines_) out += k + " = " + v + "\n";
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << str();
    if (!out) throw IoError("write failed: " + path);
  }

 private:
  std::vector<std::pair<std::string, std::string>> lines_;
};

}  // namespace darec

#endif  // DAREC_CONFIG_HPP_
