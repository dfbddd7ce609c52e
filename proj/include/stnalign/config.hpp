#ifndef STNALIGN_CONFIG_HPP_
#define STNALIGN_CONFIG_HPP_

#include <cstdio>
#include <fstream>
#include <map>
#include <utility>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stnalign/tensor.hpp"

namespace stnalign {

/// Plain-text `key=value` settings. '#' starts a comment line.
class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw InputError("config line " + std::to_string(lineno) + " has no '='");
      kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const& { return values_; }
  /// By value on temporaries so `for (auto& e : x.to_kv().entries())` stays valid.
  std::map<std::string, std::string> entries() && { return std::move(values_); }

  std::string get(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double get(const std::string& key, double fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : to_double(key, it->second);
  }
  long get(const std::string& key, long fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const double v = to_double(key, it->second);
    if (v != static_cast<double>(static_cast<long>(v))) throw InputError("config key '" + key + "' must be an integer");
    return static_cast<long>(v);
  }
  int get(const std::string& key, int fallback) const { return static_cast<int>(get(key, static_cast<long>(fallback))); }
  bool get(const std::string& key, bool fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "1" || it->second == "true") return true;
    if (it->second == "0" || it->second == "false") return false;
    throw InputError("config key '" + key + "' must be true/false");
  }
  std::vector<int> get(const std::string& key, const std::vector<int>& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<int> out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(to_double(key, trim(item))));
    return out;
  }

  /// Keys present but never read; callers reject these.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  std::string to_text() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
    return s;
  }

  static std::string format(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
  static std::string format(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }
  static double to_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double d = 0.0;
    try {
      d = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != v.size()) throw InputError("config key '" + key + "' has non-numeric value '" + v + "'");
    return d;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace stnalign

#endif  // STNALIGN_CONFIG_HPP_
