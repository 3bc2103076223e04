#include "vlmh/error.hpp"

namespace vlmh {

std::string_view kind_name(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::MissingImage: return "MissingImage";
    case ErrorKind::DuplicatePartId: return "DuplicatePartId";
    case ErrorKind::InsufficientImages: return "InsufficientImages";
    case ErrorKind::NetworkError: return "NetworkError";
    case ErrorKind::AuthError: return "AuthError";
    case ErrorKind::RateLimited: return "RateLimited";
    case ErrorKind::ReplayMiss: return "ReplayMiss";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::PreconditionViolation: return "PreconditionViolation";
    case ErrorKind::ParseFailure: return "ParseFailure";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::DegenerateVector: return "DegenerateVector";
    case ErrorKind::JudgeParseFailure: return "JudgeParseFailure";
    case ErrorKind::JudgeOutOfRange: return "JudgeOutOfRange";
    case ErrorKind::InconsistentMetricSets: return "InconsistentMetricSets";
    case ErrorKind::UnapprovedPrompts: return "UnapprovedPrompts";
    case ErrorKind::GatewayError: return "GatewayError";
    case ErrorKind::PartialRun: return "PartialRun";
    case ErrorKind::DuplicateDistribution: return "DuplicateDistribution";
    case ErrorKind::UnknownExplanation: return "UnknownExplanation";
    case ErrorKind::DuplicateRating: return "DuplicateRating";
    case ErrorKind::ScoreOutOfRange: return "ScoreOutOfRange";
    case ErrorKind::UnknownRun: return "UnknownRun";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::InvalidWindow: return "InvalidWindow";
    case ErrorKind::TooManyImages: return "TooManyImages";
    case ErrorKind::ResponseParseFailure: return "ResponseParseFailure";
    case ErrorKind::AnswerNotInOptions: return "AnswerNotInOptions";
    case ErrorKind::DuplicateItemId: return "DuplicateItemId";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

nlohmann::json Error::to_json() const {
  nlohmann::json j = {{"error", std::string(kind_name(kind_))}, {"message", what()}};
  if (!details_.is_null()) j["details"] = details_;
  return j;
}

}  // namespace vlmh
