#pragma once

#include <stdexcept>
#include <string>

namespace polyreply {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller passed arguments that violate an operation's precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Input data is unreadable, corrupt, or inconsistent with its manifest.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A stage touched data that lives outside its region.
class RegionViolation : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite loss or gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace polyreply
