#pragma once

#include <stdexcept>
#include <string>

namespace sparseq {

enum class ErrorKind {
  Shape,
  Config,
  Pattern,
  Range,
  Format,
  Graph,
  Training,
  Io,
};

const char* to_string(ErrorKind kind) noexcept;

// Single exception type for the library; `kind()` carries the category so
// the CLI can map failures onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Config: return "config";
    case ErrorKind::Pattern: return "pattern";
    case ErrorKind::Range: return "range";
    case ErrorKind::Format: return "format";
    case ErrorKind::Graph: return "graph";
    case ErrorKind::Training: return "training";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

}  // namespace sparseq
