#pragma once

#include <stdexcept>
#include <string>

namespace mmfusion {

// Invalid configuration values or precondition violations on user input.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed cohort, checkpoint or config files.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mmfusion
