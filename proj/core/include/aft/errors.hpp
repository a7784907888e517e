#pragma once

#include <stdexcept>
#include <string>

namespace aft {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or extent disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or layer configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. a backward call with a cache from a different forward.
class UsageError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Named entity (layer, head, parameter) not present.
class LookupError : public Error {
 public:
  using Error::Error;
};

}  // namespace aft
