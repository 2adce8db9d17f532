#pragma once

#include <stdexcept>
#include <string>

namespace midline {

/// Invalid configuration or arguments; CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite values during training or inference; CLI exit code 3.
struct NumericFailure : std::runtime_error {
  explicit NumericFailure(const std::string& msg) : std::runtime_error(msg) {}
};

/// Empty or undefined result (e.g. no midline found); CLI exit code 4.
struct EmptyResult : std::runtime_error {
  explicit EmptyResult(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace midline
