#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace invariance {

enum class ErrorCode {
  MalformedHeader,
  TruncatedPayload,
  DimensionMismatch,
  ShapeMismatch,
  TooFewExamples,
  EmptyGrid,
  EmptyMask,
  EmptyInput,
  ConvergenceFailure,
  NoDonorAvailable,
  InvalidParams,
  NotFound,
  DivergenceDetected,
  UnknownImage,
  UnknownItem,
  BudgetExceeded,
  StaleSession,
  DuplicateVote,
  NoVotes,
  Io,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TooFewExamples: return "TooFewExamples";
    case ErrorCode::EmptyGrid: return "EmptyGrid";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ConvergenceFailure: return "ConvergenceFailure";
    case ErrorCode::NoDonorAvailable: return "NoDonorAvailable";
    case ErrorCode::InvalidParams: return "InvalidParams";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::UnknownImage: return "UnknownImage";
    case ErrorCode::UnknownItem: return "UnknownItem";
    case ErrorCode::BudgetExceeded: return "BudgetExceeded";
    case ErrorCode::StaleSession: return "StaleSession";
    case ErrorCode::DuplicateVote: return "DuplicateVote";
    case ErrorCode::NoVotes: return "NoVotes";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable code; every module throws this.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace invariance
