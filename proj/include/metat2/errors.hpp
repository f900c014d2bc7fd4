#pragma once

#include <stdexcept>
#include <string>

namespace metat2 {

// Exit codes surfaced by the CLI.
enum class ExitCode : int { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a loss goes non-finite. The parameters have not been updated.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace metat2
