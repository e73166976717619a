#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace epact {

enum class ErrorCode {
  Unreachable,
  LimitViolation,
  InvalidState,
  TerminalEnv,
  NotTerminal,
  Unplannable,
  IOFailure,
  ExhaustedRetries,
  SchemaViolation,
  EmptySplit,
  BadIndex,
  TooFewEpisodes,
  ShapeMismatch,
  UnknownVariant,
  NonFiniteLoss,
  SuccessNotAFailure,
  EmptyBuffer,
  InvalidConfig,
};

std::string_view to_string(ErrorCode code);

// Every module reports failures through this one exception type; the code
// lets callers (and the CLI exit-code mapping) branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Unreachable: return "Unreachable";
    case ErrorCode::LimitViolation: return "LimitViolation";
    case ErrorCode::InvalidState: return "InvalidState";
    case ErrorCode::TerminalEnv: return "TerminalEnv";
    case ErrorCode::NotTerminal: return "NotTerminal";
    case ErrorCode::Unplannable: return "Unplannable";
    case ErrorCode::IOFailure: return "IOFailure";
    case ErrorCode::ExhaustedRetries: return "ExhaustedRetries";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::BadIndex: return "BadIndex";
    case ErrorCode::TooFewEpisodes: return "TooFewEpisodes";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::UnknownVariant: return "UnknownVariant";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::SuccessNotAFailure: return "SuccessNotAFailure";
    case ErrorCode::EmptyBuffer: return "EmptyBuffer";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

}  // namespace epact
