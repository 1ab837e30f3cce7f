#pragma once

#include <stdexcept>
#include <string>

namespace patseg {

// Shape/axis disagreement between tensors or between a tensor and an op.
class DimensionError : public std::invalid_argument {
 public:
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// An image, window or pyramid level that is too small (or otherwise degenerate).
class SizeError : public std::invalid_argument {
 public:
  explicit SizeError(const std::string& what) : std::invalid_argument(what) {}
};

// Bad user-supplied configuration (unknown key, out-of-range value, ...).
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// Filesystem / encoding failures.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// A caller broke an API contract (e.g. asked Adam to step a parameter
// that has no gradient).
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

}  // namespace patseg
