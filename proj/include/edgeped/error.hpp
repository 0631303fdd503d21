#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace edgeped {

// Root of every error thrown by the library. Subclasses carry the structured
// fields callers dispatch on; what() is always a single line.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor/shape disagreement. `axis` names the offending dimension
// ("n", "c", "h", "w", "weights", ...).
class DimensionError : public Error {
 public:
  DimensionError(std::string axis, const std::string& detail)
      : Error("dimension error on axis '" + axis + "': " + detail), axis_(std::move(axis)) {}
  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

// A kernel was called with parameters it does not serve (e.g. pointwise with k != 1).
class MisuseError : public Error {
 public:
  using Error::Error;
};

// Numeric argument outside its mathematical domain (negative variance, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Model config text could not be parsed. Line numbers are 1-based.
class ConfigError : public Error {
 public:
  ConfigError(std::size_t line, const std::string& detail)
      : Error("config line " + std::to_string(line) + ": " + detail), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Graph wiring is inconsistent (channel chain, strides, heads).
class GraphError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

}  // namespace edgeped
