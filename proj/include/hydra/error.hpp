#pragma once

#include <stdexcept>
#include <string>

namespace hydra {

// Root of every error the library throws. The category drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

// Point on or outside the Poincare ball boundary.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or degenerate denominators; aborts training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward on a detached tensor, empty batches, etc.
class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent datasets (manifest, embedding files, checkpoints).
class DataError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public DataError {
 public:
  using DataError::DataError;
};

// Open-set records outside the test split.
class ProtocolError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace hydra
