#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dspa {

/// Classifies every failure the library reports. The CLI maps these onto
/// process exit codes, tests match on them.
enum class ErrorCode {
  kInvalidArgument,
  kDimensionMismatch,
  kNonFinite,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kMalformedMetadata,
  kIo,
  kInvalidTrace,
  kInvalidTriple,
  kEmptyInput,
  kThresholdMismatch,
  kDegenerateScores,
  kIllConditioned,
  kInvalidWorld,
  kInternal,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kDimensionMismatch: return "dimension mismatch";
    case ErrorCode::kNonFinite: return "non-finite value";
    case ErrorCode::kBadMagic: return "bad magic";
    case ErrorCode::kBadVersion: return "unsupported version";
    case ErrorCode::kTruncated: return "unexpected end of data";
    case ErrorCode::kMalformedMetadata: return "malformed metadata";
    case ErrorCode::kIo: return "i/o failure";
    case ErrorCode::kInvalidTrace: return "invalid trace";
    case ErrorCode::kInvalidTriple: return "invalid triple";
    case ErrorCode::kEmptyInput: return "empty input";
    case ErrorCode::kThresholdMismatch: return "threshold mismatch";
    case ErrorCode::kDegenerateScores: return "degenerate scores";
    case ErrorCode::kIllConditioned: return "ill-conditioned system";
    case ErrorCode::kInvalidWorld: return "invalid world";
    case ErrorCode::kInternal: return "internal error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) fail(code, what);
}

}  // namespace dspa
