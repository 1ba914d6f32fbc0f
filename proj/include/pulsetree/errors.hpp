#ifndef PULSETREE_ERRORS_HPP
#define PULSETREE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace pulsetree {

/// Bad input data or configuration (CLI exit code 2).
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Numerical failure: instability, collapse, non-finite loss (CLI exit code 3).
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Command-line misuse (CLI exit code 1).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace pulsetree

#endif
