#pragma once

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "tscan/errors.hpp"

namespace tscan {

// Strict-config helper: every key in j must appear in allowed.
inline void reject_unknown_keys(const nlohmann::json& j,
                                std::initializer_list<const char*> allowed,
                                const std::string& context) {
  if (!j.is_object()) throw ConfigError(context + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* a : allowed) {
      if (it.key() == a) {
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError(context + ": unknown key '" + it.key() + "'");
  }
}

inline nlohmann::json parse_json(const std::string& text, const std::string& context) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(context + ": " + e.what());
  }
}

}  // namespace tscan
