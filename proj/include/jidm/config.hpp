// Sectioned `key = value` text configuration, shared by run configs, dataset
// manifests and chain descriptions.
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "jidm/kinematics.hpp"
#include "jidm/render.hpp"

namespace jidm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    s += format_double(v[i]);
  }
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

class TextConfig {
 public:
  using Section = std::map<std::string, std::string>;

  static TextConfig parse(const std::string& text) {
    TextConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty section name");
        cfg.sections_[section];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside of a section");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
      auto& sec = cfg.sections_[section];
      if (sec.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key " + section + "." + key);
      sec[key] = trim(line.substr(eq + 1));
    }
    return cfg;
  }

  static TextConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  std::string to_string() const {
    std::string out;
    bool first = true;
    for (const auto& [name, sec] : sections_) {
      if (!first) out += "\n";
      first = false;
      out += "[" + name + "]\n";
      for (const auto& [k, v] : sec) out += k + " = " + v + "\n";
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path);
    out << to_string();
  }

  bool has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key);
  }
  bool has_section(const std::string& section) const { return sections_.count(section) != 0; }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = value;
  }
  void set(const std::string& section, const std::string& key, double value) { set(section, key, format_double(value)); }
  void set(const std::string& section, const std::string& key, int value) { set(section, key, std::to_string(value)); }
  void set(const std::string& section, const std::string& key, std::uint64_t value) {
    set(section, key, std::to_string(value));
  }
  void set(const std::string& section, const std::string& key, const std::vector<double>& value) {
    set(section, key, format_list(value));
  }

  const std::string& raw(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    if (it == sections_.end()) throw ConfigError("missing section [" + section + "]");
    auto kt = it->second.find(key);
    if (kt == it->second.end()) throw ConfigError("missing key " + section + "." + key);
    return kt->second;
  }

  double get_double(const std::string& section, const std::string& key) const {
    return parse_double(raw(section, key), section + "." + key);
  }
  long long get_int(const std::string& section, const std::string& key) const {
    const std::string& s = raw(section, key);
    long long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
      throw ConfigError(section + "." + key + ": expected integer, got '" + s + "'");
    return v;
  }
  std::uint64_t get_u64(const std::string& section, const std::string& key) const {
    const std::string& s = raw(section, key);
    std::uint64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
      throw ConfigError(section + "." + key + ": expected unsigned integer, got '" + s + "'");
    return v;
  }
  bool get_bool(const std::string& section, const std::string& key) const {
    const std::string& s = raw(section, key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(section + "." + key + ": expected boolean, got '" + s + "'");
  }
  std::vector<double> get_list(const std::string& section, const std::string& key) const {
    std::vector<double> out;
    const std::string& s = raw(section, key);
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      out.push_back(parse_double(item, section + "." + key));
    }
    return out;
  }
  std::string get_string(const std::string& section, const std::string& key) const { return raw(section, key); }

  const std::map<std::string, Section>& sections() const { return sections_; }

  /// Overlay `other` on top of this config (other wins).
  void merge(const TextConfig& other) {
    for (const auto& [name, sec] : other.sections_)
      for (const auto& [k, v] : sec) sections_[name][k] = v;
  }

  /// Rejects any section or key of this config absent from `schema`.
  void check_known(const TextConfig& schema) const {
    for (const auto& [name, sec] : sections_) {
      if (!schema.has_section(name)) throw ConfigError("unknown section [" + name + "]");
      for (const auto& [k, v] : sec)
        if (!schema.has(name, k)) throw ConfigError("unknown key " + name + "." + k);
    }
  }

 private:
  static double parse_double(const std::string& s, const std::string& what) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
      throw ConfigError(what + ": expected number, got '" + s + "'");
    return v;
  }

  std::map<std::string, Section> sections_;
};

inline void write_chain(TextConfig& cfg, const ChainConfig& chain, const std::string& section = "chain") {
  std::vector<double> lo, hi;
  for (const auto& l : chain.joint_limits) {
    lo.push_back(l.lo);
    hi.push_back(l.hi);
  }
  cfg.set(section, "n_joints", static_cast<int>(chain.n_joints()));
  cfg.set(section, "link_lengths", chain.link_lengths);
  cfg.set(section, "link_radii", chain.link_radii);
  cfg.set(section, "limits_lo", lo);
  cfg.set(section, "limits_hi", hi);
  cfg.set(section, "base_position", std::vector<double>{chain.base_position.x(), chain.base_position.y()});
}

inline ChainConfig read_chain(const TextConfig& cfg, const std::string& section = "chain") {
  ChainConfig c;
  const auto n = static_cast<std::size_t>(cfg.get_int(section, "n_joints"));
  c.link_lengths = cfg.get_list(section, "link_lengths");
  c.link_radii = cfg.get_list(section, "link_radii");
  const auto lo = cfg.get_list(section, "limits_lo");
  const auto hi = cfg.get_list(section, "limits_hi");
  if (c.link_lengths.size() != n || lo.size() != n || hi.size() != n)
    throw ConfigError("[" + section + "] list lengths disagree with n_joints");
  for (std::size_t i = 0; i < n; ++i) c.joint_limits.push_back({lo[i], hi[i]});
  const auto base = cfg.get_list(section, "base_position");
  if (base.size() != 2) throw ConfigError("[" + section + "] base_position needs 2 values");
  c.base_position = Vec2(base[0], base[1]);
  c.validate();
  return c;
}

inline void write_camera(TextConfig& cfg, const CameraModel& cam, const std::string& section = "camera") {
  cfg.set(section, "scale", cam.scale);
  cfg.set(section, "offset", std::vector<double>{cam.offset.x(), cam.offset.y()});
  cfg.set(section, "height", cam.height);
  cfg.set(section, "width", cam.width);
}

inline CameraModel read_camera(const TextConfig& cfg, const std::string& section = "camera") {
  CameraModel cam;
  cam.scale = cfg.get_double(section, "scale");
  const auto off = cfg.get_list(section, "offset");
  if (off.size() != 2) throw ConfigError("[" + section + "] offset needs 2 values");
  cam.offset = Vec2(off[0], off[1]);
  cam.height = static_cast<int>(cfg.get_int(section, "height"));
  cam.width = static_cast<int>(cfg.get_int(section, "width"));
  cam.validate();
  return cam;
}

inline void write_style(TextConfig& cfg, const RenderStyle& style, const std::string& section = "style") {
  cfg.set(section, "base_intensity", style.per_link_base_intensity);
  cfg.set(section, "shading_gain", style.radial_shading_gain);
  cfg.set(section, "background", style.background_value);
  cfg.set(section, "supersample", style.supersample_factor);
  cfg.set(section, "channels", style.channels);
}

inline RenderStyle read_style(const TextConfig& cfg, const std::string& section = "style") {
  RenderStyle s;
  s.per_link_base_intensity = cfg.get_list(section, "base_intensity");
  s.radial_shading_gain = cfg.get_double(section, "shading_gain");
  s.background_value = cfg.get_double(section, "background");
  s.supersample_factor = static_cast<int>(cfg.get_int(section, "supersample"));
  s.channels = static_cast<int>(cfg.get_int(section, "channels"));
  return s;
}

}  // namespace jidm
