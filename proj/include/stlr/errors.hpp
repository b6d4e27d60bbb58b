#pragma once

#include <stdexcept>
#include <string>

namespace stlr {

// Process exit codes used by the command-line front end.
enum class ExitCode : int {
  ok = 0,
  generic = 1,
  config = 2,
  data = 3,
  numeric = 4,
  resume_conflict = 5,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::generic; }
};

// Invalid configuration, schema violation, bad argument.
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::config; }
};

// Malformed or semantically invalid input data.
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

// NaN/Inf during training or evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

// Existing experiment state disagrees with the requested run.
class ResumeConflict : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::resume_conflict; }
};

// A frozen tensor changed during an adapter-only phase.
class GroupLeakError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

// Tensor shapes disagree (checkpoint vs model, sidecar vs adapters, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

}  // namespace stlr
