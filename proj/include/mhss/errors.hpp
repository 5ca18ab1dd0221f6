#pragma once

#include <stdexcept>
#include <string>

namespace mhss {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between tensors.
struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Bad hyperparameters, config keys, or CLI flags.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Caller violated an operation precondition (empty data, bad label, ...).
struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Malformed file contents.
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// NaN or Inf where a finite value is required.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Unreadable or unwritable path.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace mhss
