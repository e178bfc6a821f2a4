#pragma once

#include <stdexcept>
#include <string>

namespace retinet {

/// Malformed input data, files or numerical invariants violated by data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or API misuse by the caller.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace retinet
