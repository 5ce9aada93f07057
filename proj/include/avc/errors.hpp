#pragma once

#include <stdexcept>
#include <string>

namespace avc {

/// Caller passed something malformed (bad index, mismatched sizes, bad file).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The model itself violates a precondition (e.g. a reducible chain).
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Agent configuration is inconsistent with the environment.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training produced non-finite parameters.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unknown experiment, bad command line, or missing artifacts.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace avc
