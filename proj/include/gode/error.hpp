#pragma once

#include <stdexcept>
#include <string>

namespace gode {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A forward operation produced NaN or Inf from finite inputs.
class OverflowError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidBasisError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Misuse of the differentiation tape (non-scalar loss, double backward).
class TapeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class NonConvergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace gode
