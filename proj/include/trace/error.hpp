#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace trace {

enum class ErrorCode {
  kNoSamples,
  kInvalidOpacity,
  kPatchOutOfBounds,
  kPlacementInfeasible,
  kInsufficientBackgrounds,
  kNotPositionInvariant,
  kInvalidVariance,
  kNoVictimObject,
  kDetectorUnavailable,
  kProtocolViolation,
  kInvalidArgument,
  kIo,
};

inline const char* ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNoSamples: return "no samples";
    case ErrorCode::kInvalidOpacity: return "invalid opacity";
    case ErrorCode::kPatchOutOfBounds: return "patch out of bounds";
    case ErrorCode::kPlacementInfeasible: return "placement infeasible";
    case ErrorCode::kInsufficientBackgrounds: return "insufficient backgrounds";
    case ErrorCode::kNotPositionInvariant: return "candidate is not position-invariant";
    case ErrorCode::kInvalidVariance: return "invalid variance";
    case ErrorCode::kNoVictimObject: return "no victim object";
    case ErrorCode::kDetectorUnavailable: return "detector unavailable";
    case ErrorCode::kProtocolViolation: return "protocol violation";
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kIo: return "i/o error";
  }
  return "unknown";
}

// All library failures surface as this exception; what() starts with the
// canonical code name so CLI output and logs stay greppable.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail = {})
      : std::runtime_error(detail.empty()
                               ? std::string(ErrorCodeName(code))
                               : std::string(ErrorCodeName(code)) + ": " + detail),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 protected:
  struct Verbatim {};
  Error(ErrorCode code, const std::string& message, Verbatim)
      : std::runtime_error(message), code_(code) {}

 private:
  ErrorCode code_;
};

// Wraps a failure with the pipeline phase it happened in.
class PhaseError : public Error {
 public:
  PhaseError(std::string phase, const Error& inner)
      : Error(inner.code(), "[" + phase + "] " + inner.what(), Verbatim{}),
        phase_(std::move(phase)) {}

  const std::string& phase() const noexcept { return phase_; }

 private:
  std::string phase_;
};

}  // namespace trace
