#pragma once

#include <stdexcept>
#include <string>

namespace changedet {

/// Structural problems: tensor/pyramid shape mismatches, incompatible layers.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

/// Value-domain problems: non-binary masks, unknown class ids, bad thresholds.
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

/// A data source is too small for the requested operation.
struct CapacityError : std::runtime_error {
  explicit CapacityError(const std::string& what) : std::runtime_error(what) {}
};

/// File system and codec failures, always carrying the offending path.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite values where finite ones are required (NaN loss, inf logits).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Bad configuration files, keys, or command-line usage.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace changedet
