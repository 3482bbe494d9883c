#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace labkit {

// Error taxonomy shared by every layer. Callers branch on kind(), never on
// the message text.
enum class ErrorKind {
  NotActive,
  UnknownOperation,
  UnknownModule,
  OutOfRange,
  Busy,
  DeviceFault,
  NotImplementedByHardware,
  Forbidden,
  DegenerateData,
  NoConvergence,
  DegenerateGeometry,
  Precondition,
  ActivationFailed,
  Syntax,
  Schema,
  Io,
  Bind,
  Connect,
  Timeout,
  ConnectionLost,
  Protocol,
  Internal,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ActivationFailed : public Error {
 public:
  ActivationFailed(std::string module, ErrorKind cause, const std::string& message)
      : Error(ErrorKind::ActivationFailed,
              "activation of '" + module + "' failed: " + message),
        module_(std::move(module)),
        cause_(cause) {}

  const std::string& module() const noexcept { return module_; }
  ErrorKind cause() const noexcept { return cause_; }

 private:
  std::string module_;
  ErrorKind cause_;
};

class SyntaxError : public Error {
 public:
  SyntaxError(std::size_t line, std::size_t column, const std::string& message)
      : Error(ErrorKind::Syntax, "line " + std::to_string(line) + ", column " +
                                     std::to_string(column) + ": " + message),
        line_(line),
        column_(column) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorKind::Precondition, message);
}

}  // namespace labkit
