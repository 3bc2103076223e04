#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmh/corpus.hpp"
#include "vlmh/experiment.hpp"
#include "vlmh/gateway.hpp"

namespace vlmh {

struct VqaOption {
  std::string label;
  std::string text;

  bool operator==(const VqaOption&) const = default;
};

struct VqaItem {
  std::string item_id;
  std::string part_id;
  std::vector<ImageRef> images;
  std::string question;
  std::vector<VqaOption> options;  // dataset order, labels verbatim
  std::string answer_label;

  std::vector<std::string> labels() const;
};

struct VqaResult {
  std::string item_id;
  std::string model_id;
  std::string raw_response;
  std::optional<std::string> extracted_label;
  bool correct = false;

  bool flagged() const noexcept { return !extracted_label.has_value(); }
  bool operator==(const VqaResult&) const = default;
};

nlohmann::json to_json(const VqaResult& r);
VqaResult vqa_result_from_json(const nlohmann::json& j);

/// One item per JSONL line; image paths resolve against the dataset's
/// directory and must exist. Throws ParseError, AnswerNotInOptions,
/// DuplicateItemId or MissingImage.
std::vector<VqaItem> load_vqa(const std::filesystem::path& path);

std::string vqa_prompt_text(const VqaItem& item);

/// Finds the option label a reply commits to, trying in order: an "answer"
/// phrase ("Answer: X", "the answer is (X)"), a "(X)" or line-leading "X)"
/// marker, the first standalone token equal to a label, and finally a reply
/// that is nothing but a label in another case. Never returns a label that is
/// not in `labels`.
std::optional<std::string> extract_label(const std::string& response, std::span<const std::string> labels);

/// Grades a reply against the item's key.
VqaResult grade(const VqaItem& item, const std::string& model_id, const std::string& response);

VqaResult ask(Gateway& gateway, const VqaItem& item, const std::string& model_id);

/// Asks every item through the gateway's concurrency bound; gateway failures
/// become flagged, incorrect results with the error text as raw_response.
std::vector<VqaResult> ask_all(Gateway& gateway, std::span<const VqaItem> items, const std::string& model_id,
                               std::size_t concurrency);

struct VqaScore {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t unparsed = 0;
  /// 100*correct/total rounded half-to-even at two decimals, in hundredths of
  /// a percent (6118 == 61.18%).
  long long accuracy_centipercent = 0;

  double accuracy_percent() const noexcept { return static_cast<double>(accuracy_centipercent) / 100.0; }
  std::string accuracy_text() const;
};

/// Round-half-even of 10000*k/n, computed exactly in integers.
long long percent_half_even_centi(std::size_t k, std::size_t n);

VqaScore score(std::span<const VqaResult> results);

struct LeaderboardRow {
  std::string model_id;
  VqaScore score;
};

/// Rows sorted by accuracy descending, then model id.
std::string render_leaderboard(std::vector<LeaderboardRow> rows, ReportFormat format);

void save_vqa_results(const std::filesystem::path& path, std::span<const VqaResult> results);
std::vector<VqaResult> load_vqa_results(const std::filesystem::path& path);

}  // namespace vlmh
