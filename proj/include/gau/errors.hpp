#pragma once

#include <stdexcept>
#include <string>

namespace gau {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value; the message names the offending key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where finite values are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Raised by the allocation tracker when a configured memory limit is hit.
class OutOfMemoryError : public Error {
 public:
  using Error::Error;
};

}  // namespace gau
