// Key-value text files: `key = value` lines, `#` comments. Used for world
// and training configuration, and as the canonical config serialization that
// checkpoint hashes are computed over.
#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "loopmon/errors.hpp"

namespace loopmon {

class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(const std::string& text, const std::string& origin) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw FormatError(origin + ":" + std::to_string(lineno) +
                          ": expected key = value");
      const std::string key = trim(t.substr(0, eq));
      const std::string val = trim(t.substr(eq + 1));
      if (key.empty())
        throw FormatError(origin + ":" + std::to_string(lineno) +
                          ": empty key");
      kv.map_[key] = val;
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("config: cannot write " + path);
    out << canonical();
    if (!out) throw FormatError("config: write failed for " + path);
  }

  bool has(const std::string& key) const { return map_.count(key) != 0; }

  void set(const std::string& key, const std::string& v) { map_[key] = v; }
  void set(const std::string& key, const char* v) { map_[key] = v; }
  void set(const std::string& key, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    map_[key] = buf;
  }
  void set(const std::string& key, int v) { map_[key] = std::to_string(v); }
  void set(const std::string& key, long v) { map_[key] = std::to_string(v); }
  void set(const std::string& key, unsigned long long v) {
    map_[key] = std::to_string(v);
  }
  void set(const std::string& key, bool v) { map_[key] = v ? "true" : "false"; }

  const std::string& get_string(const std::string& key) const {
    auto it = map_.find(key);
    if (it == map_.end()) throw FormatError("config: missing key " + key);
    return it->second;
  }
  std::string get_string(const std::string& key, const std::string& dflt) const {
    auto it = map_.find(key);
    return it == map_.end() ? dflt : it->second;
  }

  double get_double(const std::string& key) const {
    return parse_double(key, get_string(key));
  }
  double get_double(const std::string& key, double dflt) const {
    return has(key) ? get_double(key) : dflt;
  }

  int get_int(const std::string& key) const {
    const std::string& s = get_string(key);
    std::size_t pos = 0;
    int v = 0;
    try {
      v = std::stoi(s, &pos);
    } catch (const std::exception&) {
      throw FormatError("config: key " + key + " is not an integer: " + s);
    }
    if (pos != s.size())
      throw FormatError("config: key " + key + " is not an integer: " + s);
    return v;
  }
  int get_int(const std::string& key, int dflt) const {
    return has(key) ? get_int(key) : dflt;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& s = get_string(key);
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      throw FormatError("config: key " + key + " is not an integer: " + s);
    }
    if (pos != s.size())
      throw FormatError("config: key " + key + " is not an integer: " + s);
    return v;
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) const {
    return has(key) ? get_u64(key) : dflt;
  }

  bool get_bool(const std::string& key) const {
    const std::string& s = get_string(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw FormatError("config: key " + key + " is not a boolean: " + s);
  }
  bool get_bool(const std::string& key, bool dflt) const {
    return has(key) ? get_bool(key) : dflt;
  }

  // Sorted `key = value` lines; the hashing and file format both use this.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : map_) {
      out += k;
      out += " = ";
      out += v;
      out += "\n";
    }
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return map_; }

 private:
  static std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }

  double parse_double(const std::string& key, const std::string& s) const {
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception&) {
      throw FormatError("config: key " + key + " is not a number: " + s);
    }
    if (pos != s.size())
      throw FormatError("config: key " + key + " is not a number: " + s);
    return v;
  }

  std::map<std::string, std::string> map_;
};

// FNV-1a, used to fingerprint canonical config text inside checkpoints.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace loopmon
