#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmh/gateway.hpp"

namespace vlmh {

enum class MetricId { rouge1, rouge2, rougeL, bleu, cosine, judge };

inline constexpr std::array<MetricId, 6> kAllMetrics = {MetricId::rouge1, MetricId::rouge2, MetricId::rougeL,
                                                        MetricId::bleu,   MetricId::cosine, MetricId::judge};

std::string to_string(MetricId id);
MetricId metric_id_from_string(const std::string& name);
/// Row label used in reports ("ROUGE-1", ..., "Judge Score").
std::string display_name(MetricId id);

/// Lowercase word tokens; never contains an empty token.
struct TokenSequence {
  std::vector<std::string> tokens;

  std::size_t size() const noexcept { return tokens.size(); }
  bool empty() const noexcept { return tokens.empty(); }
  bool operator==(const TokenSequence&) const = default;
};

/// Splits on every maximal run of characters that are not ASCII letters or
/// digits and lowercases ASCII. Bytes >= 0x80 count as word characters, so
/// UTF-8 words stay whole.
TokenSequence tokenize(std::string_view text);

/// ROUGE-N F1 over clipped n-gram counts; 0 when either side lacks n-grams.
double rouge_n(const TokenSequence& candidate, const TokenSequence& reference, int n);

/// ROUGE-L F1 from the longest common subsequence.
double rouge_l(const TokenSequence& candidate, const TokenSequence& reference);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Sentence BLEU-4: uniform geometric mean of modified precisions, add-one
/// smoothing on orders 2..4 only, times min(1, exp(1 - |ref|/|cand|)).
double bleu(const TokenSequence& candidate, const TokenSequence& reference);

/// Mean cosine similarity over all unordered pairs.
double pairwise_mean(std::span<const EmbeddingVector> vectors);

/// Mean of metric(O_i, O_j) over all ordered pairs i != j.
double lexical_consistency(std::span<const std::string> outputs, MetricId metric);

struct JudgeVerdict {
  double score = 0.0;
  std::string explanation;
};

/// Reads the first "[Score]:" line of a judge reply. Markdown emphasis and
/// whitespace around the tag are tolerated.
JudgeVerdict parse_judge(std::string_view response_text);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;

  bool operator==(const MeanStd&) const = default;
};

/// Population statistics (divide by N).
MeanStd mean_std(std::span<const double> values);

using MetricMap = std::map<MetricId, double>;

struct ConsistencyScores {
  std::string distribution_id;
  std::map<MetricId, MeanStd> per_metric;
  double average = 0.0;
  /// Spread across parts of each part's six-metric mean.
  double average_std = 0.0;
  std::size_t part_count = 0;

  bool operator==(const ConsistencyScores&) const = default;
};

nlohmann::json to_json(const ConsistencyScores& s);
ConsistencyScores consistency_scores_from_json(const nlohmann::json& j);

/// Per-metric population mean/std across parts; `average` is the unweighted
/// mean of the six per-metric means.
ConsistencyScores aggregate(std::span<const MetricMap> per_part_scores, const std::string& distribution_id);

}  // namespace vlmh
