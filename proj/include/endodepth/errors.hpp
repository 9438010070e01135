#pragma once

#include <stdexcept>
#include <string>

namespace endodepth {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A required file is missing or unreadable.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Caller passed arguments outside an operation's preconditions.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Output could not be written.
class WriteError : public Error {
 public:
  using Error::Error;
};

/// Degenerate geometry or non-finite values.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A frame pair carries no usable supervision and must be dropped.
class EmptySupportError : public Error {
 public:
  using Error::Error;
};

}  // namespace endodepth
