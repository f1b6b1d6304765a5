// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#pragma once

#include <stdexcept>
#include <string>

namespace apt {

/// Coarse error families. The CLI maps each family to its exit code.
enum class ErrorFamily { general = 1, config = 2, data = 3, pool = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorFamily family, const std::string& what)
      : std::runtime_error(what), family_(family) {}
  ErrorFamily family() const noexcept { return family_; }
  int exit_code() const noexcept { return static_cast<int>(family_); }

 private:
  ErrorFamily family_;
};

#define APT_DEFINE_ERROR(Name, Family)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(Family, what) {}      \
  };

// numeric kernel
APT_DEFINE_ERROR(DimensionError, ErrorFamily::general)
APT_DEFINE_ERROR(NumericError, ErrorFamily::general)
APT_DEFINE_ERROR(MaskError, ErrorFamily::general)

// configuration
APT_DEFINE_ERROR(ConfigError, ErrorFamily::config)

// data ingestion and partitioning
APT_DEFINE_ERROR(DataError, ErrorFamily::data)
APT_DEFINE_ERROR(LabelError, ErrorFamily::data)
APT_DEFINE_ERROR(FormatError, ErrorFamily::data)
APT_DEFINE_ERROR(PartitionError, ErrorFamily::data)

// prompt pools and composition
APT_DEFINE_ERROR(PoolError, ErrorFamily::pool)
APT_DEFINE_ERROR(StalePromptError, ErrorFamily::pool)
APT_DEFINE_ERROR(CompositionError, ErrorFamily::pool)
APT_DEFINE_ERROR(LookupError, ErrorFamily::pool)
APT_DEFINE_ERROR(SelectionError, ErrorFamily::pool)

#undef APT_DEFINE_ERROR

}  // namespace apt
