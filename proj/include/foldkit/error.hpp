// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace foldkit {

/// Category of a failure, used by the CLI to pick an exit code.
enum class ErrorKind {
  Shape,       // tensor or block shapes do not line up
  Value,       // an argument is out of its valid domain
  Format,      // a file on disk is malformed
  Topology,    // the network cannot be handled by the requested operation
  Runtime,     // numerical failure during a run (divergence etc.)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Value: return "value";
    case ErrorKind::Format: return "format";
    case ErrorKind::Topology: return "topology";
    case ErrorKind::Runtime: return "runtime";
  }
  return "unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace foldkit
