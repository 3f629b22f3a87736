#pragma once

#include <stdexcept>

namespace sgg {

/// Raised for every contract violation in the library: bad shapes, invalid
/// boxes, malformed files, inconsistent configuration.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A NaN or infinity reached an operation that cannot accept it.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace sgg
