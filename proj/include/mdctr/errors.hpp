#pragma once

#include <stdexcept>
#include <string>

namespace mdctr {

// Exit-code contract: validation/config problems map to 1, numerical
// failures (NaN/Inf, divergence, undefined metrics) map to 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mdctr
