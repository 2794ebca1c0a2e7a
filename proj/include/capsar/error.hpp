#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace capsar {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not line up for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or op configuration (even kernel, dropout >= 1, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in a forward value, a gradient, or a loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what), line_(0) {}

  // 1-based; 0 when unknown.
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Structurally valid input that violates a file format (bad magic, bad dims, ...).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Checkpoint content that fails length or checksum validation.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace capsar
