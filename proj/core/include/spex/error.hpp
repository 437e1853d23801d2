#pragma once

#include <stdexcept>
#include <string>

namespace spex {

// Base for every error raised by the library. The CLI maps the subclasses to
// exit codes: ConfigError -> 2, NumericError -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file. Carries the offending line when known.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : what + " (line " + std::to_string(line) + ")"),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Randomized construction did not reach its acceptance threshold.
class ConstructionError : public Error {
 public:
  ConstructionError(const std::string& what, double best)
      : Error(what), best_(best) {}
  double best() const noexcept { return best_; }

 private:
  double best_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace spex
