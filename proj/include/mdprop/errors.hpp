#pragma once

#include <stdexcept>
#include <string>

namespace mdprop {

// Exit codes used by the command-line harness.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kRuntime = 3,
  kData = 4,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kRuntime)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, ExitCode::kConfig) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error(what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what, ExitCode::kData) {}
};

// Raised when an attack cannot find enough distinct foreign classes.
class TargetSelectionError : public Error {
 public:
  explicit TargetSelectionError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what) {}
};

}  // namespace mdprop
