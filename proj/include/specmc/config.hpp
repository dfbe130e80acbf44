#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "specmc/errors.hpp"

namespace specmc {

// Flat key/value run configuration with dotted sections:
//
//   # comment
//   [plan]
//   n_total = 4000
//   c_max = [7e-5, 2.5e-4]
//
// Keys keep their first-seen order so section enumeration is stable and the
// resolved echo is deterministic.
class RunConfig {
 public:
  RunConfig() = default;

  static RunConfig parse_string(std::string_view text, const std::string& origin) {
    RunConfig cfg;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t eol = text.find('\n', pos);
      std::string line(text.substr(pos, eol == std::string_view::npos
                                            ? std::string_view::npos
                                            : eol - pos));
      pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
      ++line_no;
      strip_comment(line);
      trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']' || line.size() < 3) {
          throw usage_error(origin + ":" + std::to_string(line_no) +
                            ": malformed section header");
        }
        section = line.substr(1, line.size() - 2);
        trim(section);
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw usage_error(origin + ":" + std::to_string(line_no) +
                          ": expected key = value");
      }
      std::string key = line.substr(0, eq);
      std::string value = line.substr(eq + 1);
      trim(key);
      trim(value);
      unquote(value);
      if (key.empty()) {
        throw usage_error(origin + ":" + std::to_string(line_no) + ": empty key");
      }
      cfg.set(section.empty() ? key : section + "." + key, value);
    }
    return cfg;
  }

  static RunConfig parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str(), path.filename().string());
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) {
      order_.push_back(key);
      values_[key] = value;
    } else {
      it->second = value;
    }
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw usage_error("config is missing key '" + key + "'");
    return it->second;
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key) const {
    return to_double(get_string(key), key);
  }
  double get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  std::int64_t get_int(const std::string& key) const {
    return to_int(get_string(key), key);
  }
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    return has(key) ? get_int(key) : fallback;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string s = get_string(key);
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw usage_error("config key '" + key + "' is not an unsigned integer: " + s);
    }
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? get_u64(key) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    std::string s = get_string(key);
    std::transform(s.begin(), s.end(), s.begin(), ::tolower);
    if (s == "true" || s == "on" || s == "yes" || s == "1") return true;
    if (s == "false" || s == "off" || s == "no" || s == "0") return false;
    throw usage_error("config key '" + key + "' is not a boolean: " + s);
  }

  std::vector<double> get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& cell : split_list(get_string(key))) {
      out.push_back(to_double(cell, key));
    }
    return out;
  }

  std::vector<int> get_int_list(const std::string& key) const {
    std::vector<int> out;
    for (const auto& cell : split_list(get_string(key))) {
      out.push_back(static_cast<int>(to_int(cell, key)));
    }
    return out;
  }

  // Section names directly under a prefix, in first-seen order:
  // sections_under("tx") -> {"tx.1", "tx.2"}.
  std::vector<std::string> sections_under(const std::string& prefix) const {
    std::vector<std::string> out;
    const std::string want = prefix + ".";
    for (const auto& key : order_) {
      if (key.rfind(want, 0) != 0) continue;
      const auto rest = key.substr(want.size());
      const auto dot = rest.find('.');
      if (dot == std::string::npos) continue;  // direct key, not a subsection
      const std::string section = prefix + "." + rest.substr(0, dot);
      if (std::find(out.begin(), out.end(), section) == out.end()) {
        out.push_back(section);
      }
    }
    return out;
  }

  bool has_section(const std::string& section) const {
    const std::string want = section + ".";
    for (const auto& key : order_) {
      if (key.rfind(want, 0) == 0) return true;
    }
    return false;
  }

  // Deterministic echo of the resolved configuration.
  std::string serialize() const {
    std::string out;
    std::string current_section;
    for (const auto& key : order_) {
      const auto dot = key.rfind('.');
      const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
      const std::string leaf = dot == std::string::npos ? key : key.substr(dot + 1);
      if (section != current_section) {
        if (!out.empty()) out += "\n";
        out += "[" + section + "]\n";
        current_section = section;
      }
      out += leaf + " = " + values_.at(key) + "\n";
    }
    return out;
  }

 private:
  static void trim(std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    s = b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  }

  static void strip_comment(std::string& s) {
    if (!s.empty() && (s.front() == '#' || s.front() == ';')) {
      s.clear();
      return;
    }
    for (std::size_t i = 1; i < s.size(); ++i) {
      if (s[i] == '#' && (s[i - 1] == ' ' || s[i - 1] == '\t')) {
        s.resize(i);
        return;
      }
    }
  }

  static void unquote(std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\''))) {
      s = s.substr(1, s.size() - 2);
    }
  }

  static double to_double(const std::string& s, const std::string& key) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw usage_error("config key '" + key + "' is not a number: " + s);
    }
  }

  static std::int64_t to_int(const std::string& s, const std::string& key) {
    try {
      std::size_t used = 0;
      const std::int64_t v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw usage_error("config key '" + key + "' is not an integer: " + s);
    }
  }

  static std::vector<std::string> split_list(std::string s) {
    trim(s);
    if (!s.empty() && s.front() == '[' && s.back() == ']') {
      s = s.substr(1, s.size() - 2);
    }
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      trim(cell);
      if (!cell.empty()) out.push_back(cell);
    }
    return out;
  }

  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

}  // namespace specmc
