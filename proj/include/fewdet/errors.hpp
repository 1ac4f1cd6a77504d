#pragma once

#include <stdexcept>
#include <string>

namespace fewdet {

/// Input that cannot be read at all: bad JSON, wrong magic, truncated file.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Structurally readable input that violates a documented invariant
/// (dangling reference, duplicate id, degenerate box, unknown category).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numeric contract violation: non-finite scores, zero-norm vectors where a
/// norm is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fewdet
