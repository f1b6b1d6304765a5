// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors
//
// JSON conversions for configuration structs. Unknown keys and wrongly typed
// values raise ConfigError; absent keys keep their defaults.

#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "apt/errors.hpp"
#include "apt/vit.hpp"

namespace apt {

using Json = nlohmann::json;

/// Throws ConfigError naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const Json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view what);

/// Reads `j[key]` into `out` when present; type mismatches become ConfigError.
template <typename V>
void read_optional(const Json& j, const char* key, V& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("field '") + key + "': " + e.what());
  }
}

void to_json(Json& j, const BackboneConfig& c);
void from_json(const Json& j, BackboneConfig& c);

/// Parses JSON text, mapping syntax errors to ConfigError.
Json parse_json(std::string_view text, std::string_view what);

}  // namespace apt
