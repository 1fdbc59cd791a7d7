#include "cimp/error.hpp"

namespace cimp {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::DegenerateNorm: return "degenerate-norm";
    case ErrorKind::Format: return "format";
    case ErrorKind::Incompatible: return "incompatible";
    case ErrorKind::Conflict: return "conflict";
    case ErrorKind::Label: return "label";
    case ErrorKind::MissingPrototype: return "missing-prototype";
    case ErrorKind::ReplayCoverage: return "replay-coverage";
    case ErrorKind::Dataset: return "dataset";
    case ErrorKind::Config: return "config";
    case ErrorKind::Dependency: return "dependency";
    case ErrorKind::Io: return "io";
    case ErrorKind::Contract: return "contract";
  }
  return "unknown";
}

void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, std::string(to_string(kind)) + " error: " + message);
}

}  // namespace cimp
