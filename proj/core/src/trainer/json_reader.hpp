// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "stproph/error.hpp"

namespace stproph::trainer {

inline nlohmann::json parse_json(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin + ": malformed JSON (" + e.what() + ")");
  }
}

/// Reads typed fields from one JSON object and rejects keys nobody asked for.
class JsonReader {
 public:
  JsonReader(nlohmann::json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  bool read(const std::string& key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return false;
    seen_.insert(key);
    convert(*it, out, path_ + "." + key);
    return true;
  }

  std::optional<JsonReader> object(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return std::nullopt;
    seen_.insert(key);
    return JsonReader(*it, path_ + "." + key);
  }

  std::optional<nlohmann::json> raw(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return std::nullopt;
    seen_.insert(key);
    return *it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown configuration key '" + path_ + "." + key + "'");
    }
  }

 private:
  static void convert(const nlohmann::json& v, bool& out, const std::string& path) {
    if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
    out = v.get<bool>();
  }
  static void convert(const nlohmann::json& v, double& out, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
    out = v.get<double>();
  }
  template <class T, std::enable_if_t<std::is_integral_v<T> && std::is_unsigned_v<T> && !std::is_same_v<T, bool>, int> = 0>
  static void convert(const nlohmann::json& v, T& out, const std::string& path) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(path + ": expected a non-negative integer");
    }
    out = v.get<T>();
  }
  static void convert(const nlohmann::json& v, std::string& out, const std::string& path) {
    if (!v.is_string()) throw ConfigError(path + ": expected a string");
    out = v.get<std::string>();
  }
  static void convert(const nlohmann::json& v, std::vector<std::string>& out, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path + ": expected an array of strings");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_string()) throw ConfigError(path + ": expected an array of strings");
      out.push_back(e.get<std::string>());
    }
  }
  static void convert(const nlohmann::json& v, std::vector<double>& out, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path + ": expected an array of numbers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(path + ": expected an array of numbers");
      out.push_back(e.get<double>());
    }
  }
  static void convert(const nlohmann::json& v, std::optional<double>& out, const std::string& path) {
    if (v.is_null()) {
      out.reset();
      return;
    }
    double d = 0.0;
    convert(v, d, path);
    out = d;
  }

  nlohmann::json j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace stproph::trainer
