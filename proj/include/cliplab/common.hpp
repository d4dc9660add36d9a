#pragma once

#include <stdexcept>
#include <string>

namespace cliplab {

// Invalid user-supplied configuration (bad spec fields, bad config files).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite losses/gradients and other numeric breakdowns at runtime.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cliplab
