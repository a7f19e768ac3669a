#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pal {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible (message names both shapes).
struct ShapeError : Error {
  using Error::Error;
};

// An input is numerically degenerate (e.g. a zero-norm feature row).
struct DegenerateInputError : Error {
  using Error::Error;
};

// A documented precondition does not hold.
struct PreconditionError : Error {
  using Error::Error;
};

// A dataset cannot supply the requested episode shape.
struct CapacityError : Error {
  using Error::Error;
};

// A serialized file is malformed; `offset` is the byte position of the
// first inconsistency.
struct FormatError : Error {
  std::size_t offset;
  FormatError(const std::string& msg, std::size_t at)
      : Error(msg + " (at byte offset " + std::to_string(at) + ")"), offset(at) {}
};

// Invalid configuration value or combination.
struct ConfigError : Error {
  using Error::Error;
};

// Numerical failure: divergence, non-finite values, oracle breakdown.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace pal
