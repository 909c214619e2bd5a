#pragma once

#include <stdexcept>
#include <string>

namespace ctxssl {

/// Broad failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  Config,    // invalid configuration or arguments
  Domain,    // value outside its valid domain (e.g. negative blur)
  Shape,     // tensor/sequence shape mismatch
  Numeric,   // non-finite loss or gradient
  Mismatch,  // artifacts that do not belong together (world vs checkpoint)
  Io,        // file could not be read or written, corrupt container
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace ctxssl
