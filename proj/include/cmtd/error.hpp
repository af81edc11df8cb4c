#pragma once

#include <stdexcept>
#include <string>

namespace cmtd {

// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes incompatible with an op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or mismatched file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or argument combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Numerical failure (NaN/Inf, divergence) during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cmtd
