#pragma once

// Flat key=value config files; '#' starts a comment, blank lines ignored.

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "fracseg/common.hpp"

namespace fracseg {

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("config: cannot open " + path);
    KeyValueConfig cfg;
    cfg.parse_stream(is, path);
    return cfg;
  }

  void parse_string(const std::string& text) {
    std::istringstream is(text);
    parse_stream(is, "<inline>");
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw DataError("config: key '" + key + "' has non-numeric value '" + it->second + "'");
    }
  }

  long get_int(const std::string& key, long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      size_t pos = 0;
      const long v = std::stol(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw DataError("config: key '" + key + "' has non-integer value '" + it->second + "'");
    }
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  void parse_stream(std::istream& is, const std::string& origin) {
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const size_t first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw DataError("config " + origin + ":" + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
      values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
  }

  static std::string trim(std::string s) {
    const size_t a = s.find_first_not_of(" \t\r");
    const size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  }
  std::map<std::string, std::string> values_;
};

}  // namespace fracseg
