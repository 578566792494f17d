#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dualvi {

/// Mismatched vector/matrix sizes or ragged inputs.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside its mathematical domain (non-positive scale, y = 0 for
/// stochastic volatility, overflowing exponent, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Dual variables outside the open feasible set of a site conjugate.
class InfeasibleError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Cholesky factorization of a matrix that should be positive definite failed.
class FactorizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file or configuration. `line()` is 1-based, 0 if unknown.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& where, std::size_t line, const std::string& what)
      : std::runtime_error(where + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace dualvi
