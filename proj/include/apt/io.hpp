// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace apt {

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file, then renames over `path`, so readers
/// see either the old or the new content.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace apt
