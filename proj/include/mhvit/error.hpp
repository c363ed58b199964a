#pragma once

#include <stdexcept>
#include <string>

namespace mhvit {

// Base of every error thrown by the library. The CLI maps ValidationError to
// exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or raster geometry.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A precondition on user-supplied values or configuration was violated.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, divergence, non-deterministic functions.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mhvit
