#pragma once

#include <stdexcept>
#include <string>

namespace cotforge {

/// Invalid argument or violated precondition of a library operation.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed persisted data (JSONL rows, checkpoints, grammar files).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Experiment configuration problem; maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pipeline stage failed; maps to CLI exit code 3.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Chat backend could not deliver a reply; retryable. Exit code 4 when it
/// escapes to the CLI.
class TransportError : public std::runtime_error {
 public:
  explicit TransportError(const std::string& what, int attempts = 1)
      : std::runtime_error(what), attempts_(attempts) {}
  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

}  // namespace cotforge
