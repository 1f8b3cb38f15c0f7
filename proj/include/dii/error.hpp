#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dii {

enum class ErrorCode {
  kRankDeficient,
  kShapeMismatch,
  kNotOrthonormal,
  kUnknownSite,
  kIndexOutOfRange,
  kOverlappingSites,
  kSiteNotMlpAct,
  kZeroComponent,
  kSiteTooNarrow,
  kNonFiniteLoss,
  kPartitionMismatch,
  kEmptyEvaluation,
  kDegenerateBaseline,
  kInsufficientTemplates,
  kTemplateLeak,
  kConstructionFailed,
  kTrainingDiverged,
  kBudgetExceeded,
  kConfigInvalid,
  kIo,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kRankDeficient: return "RankDeficient";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNotOrthonormal: return "NotOrthonormal";
    case ErrorCode::kUnknownSite: return "UnknownSite";
    case ErrorCode::kIndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::kOverlappingSites: return "OverlappingSites";
    case ErrorCode::kSiteNotMlpAct: return "SiteNotMlpAct";
    case ErrorCode::kZeroComponent: return "ZeroComponent";
    case ErrorCode::kSiteTooNarrow: return "SiteTooNarrow";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kPartitionMismatch: return "PartitionMismatch";
    case ErrorCode::kEmptyEvaluation: return "EmptyEvaluation";
    case ErrorCode::kDegenerateBaseline: return "DegenerateBaseline";
    case ErrorCode::kInsufficientTemplates: return "InsufficientTemplates";
    case ErrorCode::kTemplateLeak: return "TemplateLeak";
    case ErrorCode::kConstructionFailed: return "ConstructionFailed";
    case ErrorCode::kTrainingDiverged: return "TrainingDiverged";
    case ErrorCode::kBudgetExceeded: return "BudgetExceeded";
    case ErrorCode::kConfigInvalid: return "ConfigInvalid";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace dii
