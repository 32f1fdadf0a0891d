#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mirage {

enum class ErrorCode {
  kParameter,
  kDegenerateGeometry,
  kDegenerateInput,
  kNoPlaneFound,
  kSegmentationFailed,
  kGlobalRegistrationFailed,
  kIcpDiverged,
  kDecode,
  kInsufficientData,
  kValidation,
  kConfig,
  kIo,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kParameter: return "parameter";
    case ErrorCode::kDegenerateGeometry: return "degenerate-geometry";
    case ErrorCode::kDegenerateInput: return "degenerate-input";
    case ErrorCode::kNoPlaneFound: return "no-plane-found";
    case ErrorCode::kSegmentationFailed: return "segmentation-failed";
    case ErrorCode::kGlobalRegistrationFailed: return "global-registration-failed";
    case ErrorCode::kIcpDiverged: return "icp-diverged";
    case ErrorCode::kDecode: return "decode";
    case ErrorCode::kInsufficientData: return "insufficient-data";
    case ErrorCode::kValidation: return "validation";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

/// Base exception for every failure raised by the library. The code lets
/// callers branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace mirage
