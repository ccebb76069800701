#pragma once

#include <stdexcept>
#include <string>

namespace sparsepat {

/// Base for every error raised by the pipeline. The exit code is what the CLI
/// reports when the exception escapes a stage.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

/// Malformed configuration, bad arguments, invalid input data.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, 2) {}
};

/// Input record or file violates a dataset invariant.
class ValidationError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// An artifact from an earlier stage is missing.
class PrerequisiteError : public Error {
 public:
  PrerequisiteError(const std::string& what, std::string stage)
      : Error(what, 3), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Non-finite loss, divergence.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, 4) {}
};

}  // namespace sparsepat
