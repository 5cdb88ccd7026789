#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace calg {

enum class ErrorCode {
  Usage,
  // expression language
  Syntax,
  MissingPrimitive,
  SizeExceeded,
  InsufficientPrimitives,
  // numerics
  ShapeMismatch,
  NonFiniteGradient,
  // learners
  SingleClass,
  DegenerateFeatures,
  InsufficientExamples,
  NoConvergence,
  UnknownPrimitive,
  TraceMismatch,
  NonFiniteLoss,
  // evaluation
  NoPositives,
  UnknownExpression,
  MissingCalibration,
  // data
  InvalidCorrelation,
  InfeasibleSplit,
  Format,
  VersionMismatch,
  DigestMismatch,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Usage: return "UsageError";
    case ErrorCode::Syntax: return "SyntaxError";
    case ErrorCode::MissingPrimitive: return "MissingPrimitive";
    case ErrorCode::SizeExceeded: return "SizeExceeded";
    case ErrorCode::InsufficientPrimitives: return "InsufficientPrimitives";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::DegenerateFeatures: return "DegenerateFeatures";
    case ErrorCode::InsufficientExamples: return "InsufficientExamples";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::UnknownPrimitive: return "UnknownPrimitive";
    case ErrorCode::TraceMismatch: return "TraceMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::UnknownExpression: return "UnknownExpression";
    case ErrorCode::MissingCalibration: return "MissingCalibration";
    case ErrorCode::InvalidCorrelation: return "InvalidCorrelation";
    case ErrorCode::InfeasibleSplit: return "InfeasibleSplit";
    case ErrorCode::Format: return "FormatError";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::DigestMismatch: return "DigestMismatch";
    case ErrorCode::Io: return "IoError";
  }
  return "Error";
}

/// Process exit status for an error: 1 usage, 2 data/format, 3 numeric.
inline int exit_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::Usage:
      return 1;
    case ErrorCode::NonFiniteGradient:
    case ErrorCode::NoConvergence:
    case ErrorCode::NonFiniteLoss:
      return 3;
    default:
      return 2;
  }
}

/// Every failure raised by the library. `offset` is set for syntax and
/// binary format errors (byte position in the input).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what,
        std::optional<std::size_t> offset = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code),
        offset_(offset) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> offset() const noexcept { return offset_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> offset_;
};

}  // namespace calg
