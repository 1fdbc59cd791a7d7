#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cimp {

enum class ErrorKind {
  Shape,
  Numeric,
  DegenerateNorm,
  Format,
  Incompatible,
  Conflict,
  Label,
  MissingPrototype,
  ReplayCoverage,
  Dataset,
  Config,
  Dependency,
  Io,
  Contract,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries a kind so callers (the CLI in
/// particular) can map it to an exit status without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool cond, ErrorKind kind, const std::string& message) {
  if (!cond) fail(kind, message);
}

}  // namespace cimp
