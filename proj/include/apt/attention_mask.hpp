// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace apt {

/// Boolean query-by-key matrix; `true` means the query may attend the key.
///
/// Masks may be rectangular: columns past the query count address key-only
/// tokens (memory tokens), which never act as queries.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), cells_(rows * cols, fill ? 1 : 0) {}

  static AttentionMask full(std::size_t rows, std::size_t cols) {
    return AttentionMask(rows, cols, true);
  }
  static AttentionMask diagonal(std::size_t n) {
    AttentionMask m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.set(i, i);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool allowed(std::size_t q, std::size_t k) const { return cells_[q * cols_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool value = true) {
    cells_[q * cols_ + k] = value ? 1 : 0;
  }
  bool all_true() const {
    for (auto c : cells_)
      if (!c) return false;
    return true;
  }

  /// Throws MaskError naming the first query row with no allowed key.
  void require_nonempty_rows() const;

  /// Rows rendered as strings of '1'/'0', for diagnostics and golden tables.
  std::vector<std::string> render() const;

  bool operator==(const AttentionMask&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> cells_;
};

}  // namespace apt
