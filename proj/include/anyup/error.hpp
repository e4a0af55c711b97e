#pragma once

#include <stdexcept>
#include <string>

namespace anyup {

enum class ErrorKind {
  Io,           // missing, unreadable, unwritable or truncated files
  Format,       // bytes do not follow the expected container layout
  Unsupported,  // well-formed but unsupported (dtype, version)
  Shape,        // incompatible tensor extents
  Validation,   // values or parameters violate an invariant
  Numerical,    // non-finite values produced during computation
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool ok, ErrorKind kind, const std::string& what) {
  if (!ok) fail(kind, what);
}

}  // namespace anyup
