#pragma once

#include <stdexcept>
#include <string>

namespace clipflow {

/// Base class for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem or subprocess failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (bad magic, truncation, checksum, version).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid arguments or configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or degenerate numerics.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace clipflow
