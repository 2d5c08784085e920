#pragma once

#include <stdexcept>
#include <string>

namespace ifnd {

enum class ErrorCode {
  InvalidArgument,
  ZeroRow,
  DimensionMismatch,
  UnnormalizedInput,
  LabelCardinalityMismatch,
  NotApplicable,
  EmptyLevels,
  TooFewSamples,
  EmptyClusterUnrecoverable,
  LevelMismatch,
  EpochOutOfRange,
  LengthMismatch,
  DegenerateLabels,
  ShapeMismatch,
  MissingCache,
  NonFiniteLoss,
  Parse,
  Io,
  Config,
};

inline const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ZeroRow: return "ZeroRow";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::UnnormalizedInput: return "UnnormalizedInput";
    case ErrorCode::LabelCardinalityMismatch: return "LabelCardinalityMismatch";
    case ErrorCode::NotApplicable: return "NotApplicable";
    case ErrorCode::EmptyLevels: return "EmptyLevels";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::EmptyClusterUnrecoverable: return "EmptyClusterUnrecoverable";
    case ErrorCode::LevelMismatch: return "LevelMismatch";
    case ErrorCode::EpochOutOfRange: return "EpochOutOfRange";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DegenerateLabels: return "DegenerateLabels";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingCache: return "MissingCache";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::Parse: return "Parse";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Config: return "Config";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and tests) can dispatch on the kind instead of the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ifnd
