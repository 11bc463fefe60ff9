#pragma once

#include <stdexcept>
#include <string>

namespace rfau {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  ok = 0,
  config = 2,
  io = 3,
  numeric = 4,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual ExitCode exit_code() const noexcept { return ExitCode::config; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

// A batch or subset lacks the rows a computation needs (e.g. no retained rows).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

class FormatError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::io; }
};

class IoError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::io; }
};

}  // namespace rfau
