#pragma once

#include <stdexcept>
#include <string>

namespace mixconv {

// Shape/extent disagreement between tensors.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid convolution/pooling geometry (even kernel where odd is required,
// non-exact strided output extent, oversize crop, ...).
struct GeometryError : std::runtime_error {
  explicit GeometryError(const std::string& msg) : std::runtime_error(msg) {}
};

// Degenerate statistics (empty reduction, zero variance).
struct StatisticsError : std::runtime_error {
  explicit StatisticsError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk data (bad magic, truncation, dtype mismatch).
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid run configuration (unknown key, out-of-range value).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failure, reported with path context.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mixconv
