#pragma once

#include <stdexcept>
#include <string>

namespace dlm2 {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in a forward value or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Caller violated a precondition of an operation.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Empty or malformed training / evaluation data.
class DataError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class BudgetError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

  int line() const { return line_; }

 private:
  int line_ = 0;
};

}  // namespace dlm2
