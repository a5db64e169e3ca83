#pragma once

#include <stdexcept>
#include <string>

namespace amri {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or layer hyperparameters.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// log/div outside their domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf escaped an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of an API (backward twice, infer before stats, bad config values).
class StateError : public Error {
 public:
  using Error::Error;
};

// Rejected user input: bad flags, unknown config keys, out-of-range parameters.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// File system or codec failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace amri
