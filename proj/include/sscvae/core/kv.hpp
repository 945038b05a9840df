#pragma once

#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sscvae {

// Flat key=value text block: one pair per line, '#' comments, blank lines
// ignored. Order-preserving.
class KvText {
 public:
  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : pairs_)
      if (k == key) {
        v = value;
        return;
      }
    pairs_.emplace_back(key, value);
  }

  void set_double(const std::string& key, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    set(key, buf);
  }

  void set_int(const std::string& key, long long v) { set(key, std::to_string(v)); }
  void set_bool(const std::string& key, bool v) { set(key, v ? "true" : "false"); }

  bool has(const std::string& key) const {
    for (auto& [k, v] : pairs_)
      if (k == key) return true;
    return false;
  }

  const std::string& get(const std::string& key) const {
    for (auto& [k, v] : pairs_)
      if (k == key) return v;
    throw std::invalid_argument("missing key: " + key);
  }

  double get_double(const std::string& key) const { return std::stod(get(key)); }
  long long get_int(const std::string& key) const { return std::stoll(get(key)); }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("bad boolean for " + key + ": " + v);
  }

  std::vector<int> get_int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(std::stoi(item));
    return out;
  }

  void set_int_list(const std::string& key, const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
      s += std::to_string(v[i]) + (i + 1 < v.size() ? "," : "");
    set(key, s);
  }

  const std::vector<std::pair<std::string, std::string>>& pairs() const { return pairs_; }

  std::string to_text() const {
    std::string out;
    for (auto& [k, v] : pairs_) out += k + "=" + v + "\n";
    return out;
  }

  static KvText parse(const std::string& text) {
    KvText kv;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      std::size_t first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": expected key=value, got: " + line);
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty())
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
      kv.pairs_.emplace_back(std::move(key), std::move(value));
    }
    return kv;
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
  }

  std::vector<std::pair<std::string, std::string>> pairs_;
};

}  // namespace sscvae
