#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dwgl {

enum class ErrorKind { shape, range, state, config, io, format, numeric };

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::range: return "range";
    case ErrorKind::state: return "state";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

/// Every failure raised by the library. `what()` is a single line of the
/// form `<kind>: <message>` so it can be printed verbatim by the CLI.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace dwgl
