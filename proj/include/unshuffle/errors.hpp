#pragma once

#include <stdexcept>
#include <string>

namespace unshuffle {

// Invalid user-supplied configuration (CLI maps this to exit code 2).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace unshuffle
