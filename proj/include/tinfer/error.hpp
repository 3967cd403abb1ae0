#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tinfer {

enum class ErrorKind {
  Dimension,
  Precision,
  Numeric,
  Config,
  Vocab,
  Position,
  Capacity,
  Parameter,
  Shape,
  Graph,
  Binding,
  Plan,
  Format,
  Io,
  Correctness,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` tells callers (and tests)
/// which contract was violated.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Precision: return "precision";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Config: return "config";
    case ErrorKind::Vocab: return "vocab";
    case ErrorKind::Position: return "position";
    case ErrorKind::Capacity: return "capacity";
    case ErrorKind::Parameter: return "parameter";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Graph: return "graph";
    case ErrorKind::Binding: return "binding";
    case ErrorKind::Plan: return "plan";
    case ErrorKind::Format: return "format";
    case ErrorKind::Io: return "io";
    case ErrorKind::Correctness: return "correctness";
  }
  return "unknown";
}

}  // namespace tinfer
