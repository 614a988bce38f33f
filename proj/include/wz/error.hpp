// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace wz {

enum class ErrorCode {
  InvalidArgument,
  InvalidCamera,
  InvalidLayer,
  EmptyLayer,
  DegenerateFit,
  DimensionMismatch,
  Io,
  BadMagic,
  UnsupportedVersion,
  Truncated,
  InvariantViolation,
  TrailingData,
  Provider,
  Busy,
};

inline const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::InvalidCamera: return "invalid_camera";
    case ErrorCode::InvalidLayer: return "invalid_layer";
    case ErrorCode::EmptyLayer: return "empty_layer";
    case ErrorCode::DegenerateFit: return "degenerate_fit";
    case ErrorCode::DimensionMismatch: return "dimension_mismatch";
    case ErrorCode::Io: return "io";
    case ErrorCode::BadMagic: return "bad_magic";
    case ErrorCode::UnsupportedVersion: return "unsupported_version";
    case ErrorCode::Truncated: return "truncated";
    case ErrorCode::InvariantViolation: return "invariant_violation";
    case ErrorCode::TrailingData: return "trailing_data";
    case ErrorCode::Provider: return "provider";
    case ErrorCode::Busy: return "busy";
  }
  return "unknown";
}

/// Every failure surfaced by the library carries one of the codes above so
/// callers (the CLI, the service) can map it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace wz
