#pragma once

// Plain-text scenario configuration: flat `key = value` lines, `#` comments,
// blank lines ignored. Unknown or duplicate keys are errors so typos surface
// instead of silently using defaults.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "csfa/errors.hpp"
#include "csfa/serialize.hpp"
#include "csfa/streams.hpp"

namespace csfa {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t lo = s.find_first_not_of(" \t\r");
  if (lo == std::string::npos) return "";
  std::size_t hi = s.find_last_not_of(" \t\r");
  return s.substr(lo, hi - lo + 1);
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': not a number: '" + value + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    unsigned long long v = std::stoull(value, &used);
    if (used != value.size() || value[0] == '-') throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': not a nonnegative integer: '" + value + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "on" || value == "1") return true;
  if (value == "false" || value == "off" || value == "0") return false;
  throw ConfigError("key '" + key + "': not a boolean: '" + value + "'");
}

}  // namespace detail

using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap parse_config_text(const std::string& text) {
  ConfigMap out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;

    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;

    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": empty key or value");
    }
    if (out.count(key)) {
      throw ConfigError("duplicate config key '" + key + "'");
    }
    out[key] = value;
  }
  return out;
}

inline ConfigMap parse_config_file(const std::filesystem::path& path) {
  return parse_config_text(read_file(path));
}

// The per-session drift recipe selected by `drift.kind`; `drift.severity`
// scales the whole schedule (session i runs at severity i * drift.severity).
inline DriftTransform drift_recipe(const std::string& kind) {
  const double pi = std::acos(-1.0);
  if (kind == "default" || kind == "rotation_noise") {
    return DriftTransform::compose(
        {DriftTransform::rotation(pi / 12.0), DriftTransform::noise(0.1)});
  }
  if (kind == "rotation") return DriftTransform::rotation(pi / 12.0);
  if (kind == "noise") return DriftTransform::noise(0.1);
  if (kind == "scaling") return DriftTransform::scaling(1.2);
  if (kind == "none" || kind == "identity") return DriftTransform::identity();
  throw ConfigError("unknown drift.kind '" + kind + "'");
}

inline ScenarioSpec scenario_from_config(const ConfigMap& map) {
  ScenarioSpec spec;
  std::string drift_kind = "default";
  double drift_severity = 1.0;
  for (const auto& [key, value] : map) {
    if (key == "input_dim") {
      spec.input_dim = detail::parse_uint(key, value);
    } else if (key == "base_classes") {
      spec.base_classes = detail::parse_uint(key, value);
    } else if (key == "sessions") {
      spec.sessions = detail::parse_uint(key, value);
    } else if (key == "way") {
      spec.way = detail::parse_uint(key, value);
    } else if (key == "shot") {
      spec.shot = detail::parse_uint(key, value);
    } else if (key == "samples_per_base_class") {
      spec.samples_per_base_class = detail::parse_uint(key, value);
    } else if (key == "target_per_session") {
      spec.target_per_session = detail::parse_uint(key, value);
    } else if (key == "class_std") {
      spec.class_std = detail::parse_double(key, value);
    } else if (key == "mean_radius") {
      spec.mean_radius = detail::parse_double(key, value);
    } else if (key == "novel_affinity") {
      spec.novel_affinity = detail::parse_double(key, value);
    } else if (key == "shift_session0") {
      spec.shift_session0 = detail::parse_bool(key, value);
    } else if (key == "seed") {
      spec.seed = detail::parse_uint(key, value);
    } else if (key == "drift.kind") {
      drift_kind = value;
    } else if (key == "drift.severity") {
      drift_severity = detail::parse_double(key, value);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  if (drift_kind != "default" || drift_severity != 1.0) {
    DriftTransform recipe = drift_recipe(drift_kind);
    spec.drift.clear();
    for (std::size_t i = 0; i <= spec.sessions; ++i) {
      DriftTransform t = recipe;
      double level = static_cast<double>(i);
      if (i == 0 && spec.shift_session0) level = 1.0;
      t.severity = drift_severity * level;
      spec.drift.push_back(t);
    }
  }
  spec.validate();
  return spec;
}

inline ScenarioSpec scenario_from_file(const std::filesystem::path& path) {
  return scenario_from_config(parse_config_file(path));
}

}  // namespace csfa
