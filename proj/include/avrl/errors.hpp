#pragma once

#include <stdexcept>
#include <string>

namespace avrl {

// Error categories map onto CLI exit codes (see tools/avrl.cpp).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values, infeasible CTC targets, non-deterministic loss functions.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace avrl
