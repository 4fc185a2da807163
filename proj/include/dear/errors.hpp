#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dear {

// Every library failure derives from Error. ValidationError covers bad
// user input (configs, files, flags); the CLI maps it to exit code 1 and
// everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DegenerateRowError : public Error {
 public:
  explicit DegenerateRowError(std::size_t row)
      : Error("masked softmax: row " + std::to_string(row) + " is fully masked"), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

class ZeroNormError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class InsufficientDataError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class CoverageError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class LengthError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class VersionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace dear
