#pragma once

#include <stdexcept>
#include <string>

namespace nf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/rank disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced, or argument outside an op's domain.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DomainError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Caller broke an API precondition (non-scalar loss, flow index out of range, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class InvertibilityError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class OracleError : public Error {
 public:
  using Error::Error;
};

}  // namespace nf
