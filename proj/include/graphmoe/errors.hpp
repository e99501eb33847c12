#pragma once

#include <stdexcept>
#include <string>

namespace graphmoe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A documented precondition of an operation was violated by the caller.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unreadable, truncated, or version-mismatched persisted artifact.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace graphmoe
