#pragma once

#include <stdexcept>
#include <string>

namespace xmc {

// Base class for all xmc errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller passed a bad value (out-of-range parameter, malformed flag).
// CLI exit code 1.
struct ArgumentError : Error {
  using Error::Error;
};

// A line of an input file could not be parsed. CLI exit code 2.
struct ParseError : Error {
  ParseError(const std::string& msg, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + msg), line_number(line) {}
  explicit ParseError(const std::string& msg) : Error(msg), line_number(0) {}

  std::size_t line_number;
};

// Structurally valid input violating a corpus-level contract
// (duplicate id, dimension mismatch, missing label). CLI exit code 2.
struct SchemaError : Error {
  using Error::Error;
};

// Numerically invalid data: non-finite entries, zero-norm vectors,
// degenerate statistics. CLI exit code 2.
struct DataError : Error {
  using Error::Error;
};

// Operation attempted in the wrong state (untrained index, frozen index,
// shape mismatch inside a model, non-finite gradients). CLI exit code 3.
struct StateError : Error {
  using Error::Error;
};

}  // namespace xmc
