#include "guidedseg/errors.hpp"

namespace guidedseg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidShape: return "invalid-shape";
    case ErrorCode::kInvalidLabel: return "invalid-label";
    case ErrorCode::kContractViolation: return "contract-violation";
    case ErrorCode::kConfiguration: return "configuration";
    case ErrorCode::kUnsupportedConfiguration: return "unsupported-configuration";
    case ErrorCode::kDegenerateSupport: return "degenerate-support";
    case ErrorCode::kNoPositiveRegion: return "no-positive-region";
    case ErrorCode::kDatasetTooSmall: return "dataset-too-small";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kNotFound: return "not-found";
    case ErrorCode::kBadRequest: return "bad-request";
    case ErrorCode::kNumerical: return "numerical";
    case ErrorCode::kResourceExhausted: return "resource-exhausted";
  }
  return "unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message),
      code_(code) {}

}  // namespace guidedseg
