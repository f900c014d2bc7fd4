#pragma once

#include "metat2/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

namespace metat2 {

// Config objects are parsed strictly so that a misspelt key fails loudly
// instead of silently falling back to a default.
inline void require_known_keys(const nlohmann::json& j, std::initializer_list<std::string_view> known,
                               std::string_view section) {
  if (!j.is_object()) throw ConfigError(std::string(section) + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown key '" + key + "' in " + std::string(section));
}

}  // namespace metat2
