#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace vlmh {

/// Every domain failure the harness can raise. The CLI maps any Error to exit
/// code 1 and prints `kind_name(kind)` as the machine-readable tag.
enum class ErrorKind {
  ParseError,
  MissingImage,
  DuplicatePartId,
  InsufficientImages,
  NetworkError,
  AuthError,
  RateLimited,
  ReplayMiss,
  DimensionMismatch,
  PreconditionViolation,
  ParseFailure,
  IndexOutOfRange,
  DegenerateVector,
  JudgeParseFailure,
  JudgeOutOfRange,
  InconsistentMetricSets,
  UnapprovedPrompts,
  GatewayError,
  PartialRun,
  DuplicateDistribution,
  UnknownExplanation,
  DuplicateRating,
  ScoreOutOfRange,
  UnknownRun,
  EmptyInput,
  InvalidWindow,
  TooManyImages,
  ResponseParseFailure,
  AnswerNotInOptions,
  DuplicateItemId,
  ConfigError,
  IoError,
};

std::string_view kind_name(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, nlohmann::json details = {})
      : std::runtime_error(message), kind_(kind), details_(std::move(details)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const nlohmann::json& details() const noexcept { return details_; }

  nlohmann::json to_json() const;

 private:
  ErrorKind kind_;
  nlohmann::json details_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message,
                              nlohmann::json details = {}) {
  throw Error(kind, message, std::move(details));
}

}  // namespace vlmh
