#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ctfm {

enum class ErrorKind {
  ShapeMismatch,
  DegenerateOutput,
  InvalidParameter,
  NonFinite,
  Autograd,
  Io,
  Format,
  Incompatible,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "shape_mismatch";
    case ErrorKind::DegenerateOutput: return "degenerate_output";
    case ErrorKind::InvalidParameter: return "invalid_parameter";
    case ErrorKind::NonFinite: return "non_finite";
    case ErrorKind::Autograd: return "autograd";
    case ErrorKind::Io: return "io";
    case ErrorKind::Format: return "format";
    case ErrorKind::Incompatible: return "incompatible";
  }
  return "unknown";
}

/// Every failure raised by the library. The kind is stable and machine readable,
/// the message names the offending dimension, layer path or file.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace ctfm
