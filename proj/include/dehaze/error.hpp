#pragma once

#include <iostream>
#include <stdexcept>
#include <string>

namespace dehaze {

/// Bad input data or arguments. Maps to CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid network / loss / run configuration. Maps to CLI exit code 1.
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A requested computation does not fit the configured memory budget.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while training (non-finite loss, I/O during a run). Exit code 2.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void log_warning(const std::string& msg) { std::clog << "[dehaze] warning: " << msg << '\n'; }

inline void log_info(const std::string& msg) { std::clog << "[dehaze] " << msg << '\n'; }

}  // namespace dehaze
