#pragma once

#include <stdexcept>
#include <string>

namespace serann {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or dimensions that do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed by a numeric routine.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Malformed file, record or wire payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

class InsufficientAudioError : public Error {
 public:
  using Error::Error;
};

/// Training data that cannot produce a meaningful model (e.g. one class only).
class DegenerateDataError : public Error {
 public:
  using Error::Error;
};

}  // namespace serann
