#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

// Strict JSON access: every helper carries a context string so schema
// violations name the file and field that caused them.
namespace maad::jsonutil {

using nlohmann::json;

inline json parse_text(const std::string& text, const std::string& context) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(context + ": malformed JSON: " + e.what());
  }
}

inline json parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error(path + ": cannot open");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str(), path);
}

inline void reject_unknown_keys(const json& obj, const std::string& context,
                                const std::vector<std::string>& allowed) {
  if (!obj.is_object()) {
    throw std::runtime_error(context + ": expected an object");
  }
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const auto& k : allowed) {
      if (item.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw std::runtime_error(context + ": unknown key \"" + item.key() + "\"");
    }
  }
}

inline void require_object_keys(const json& obj, const std::string& context,
                                const std::vector<std::string>& keys) {
  reject_unknown_keys(obj, context, keys);
  for (const auto& k : keys) {
    if (!obj.contains(k)) {
      throw std::runtime_error(context + ": missing key \"" + k + "\"");
    }
  }
}

inline double as_number(const json& v, const std::string& context) {
  if (!v.is_number()) {
    throw std::runtime_error(context + ": expected a number");
  }
  return v.get<double>();
}

inline int64_t as_integer(const json& v, const std::string& context) {
  if (!v.is_number_integer()) {
    throw std::runtime_error(context + ": expected an integer");
  }
  return v.get<int64_t>();
}

inline std::string as_string(const json& v, const std::string& context) {
  if (!v.is_string()) {
    throw std::runtime_error(context + ": expected a string");
  }
  return v.get<std::string>();
}

inline bool as_bool(const json& v, const std::string& context) {
  if (!v.is_boolean()) {
    throw std::runtime_error(context + ": expected a boolean");
  }
  return v.get<bool>();
}

}  // namespace maad::jsonutil
