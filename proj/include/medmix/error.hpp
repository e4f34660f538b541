#pragma once

#include <stdexcept>
#include <string>

namespace medmix {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value violates a documented invariant. `field()` names the offender.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Malformed on-disk data (bad magic, truncated payload, header mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf showed up where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent or incomplete configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace medmix
