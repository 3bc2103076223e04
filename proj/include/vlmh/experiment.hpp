#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmh/corpus.hpp"
#include "vlmh/gateway.hpp"
#include "vlmh/metrics.hpp"
#include "vlmh/paraphrase.hpp"

namespace vlmh {

struct OutputCell {
  std::size_t paraphrase_index = 0;
  std::string text;
  ChatResponse meta;

  bool operator==(const OutputCell&) const = default;
};

struct OutputMatrix {
  std::string part_id;
  std::string distribution_id;
  std::vector<OutputCell> outputs;  // sorted by paraphrase_index

  /// True when indices are exactly 0..paraphrase_count-1.
  bool complete(std::size_t paraphrase_count) const;
  std::vector<std::string> texts() const;

  bool operator==(const OutputMatrix&) const = default;
};

struct CellRef {
  std::string part_id;
  std::string distribution_id;
  std::size_t paraphrase_index = 0;

  bool operator==(const CellRef&) const = default;
};

nlohmann::json to_json(const CellRef& cell);

struct RunRecord {
  std::string run_id;
  std::string manifest_digest;
  std::string prompt_set_digest;
  GatewayMode mode = GatewayMode::replay;
  std::string created_at;
  std::uint64_t seed = 0;
  std::string model_id;
  std::vector<std::string> distribution_ids;
  std::size_t paraphrase_count = 0;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);

/// Images sent for one (part, distribution) cell group.
struct CellInputs {
  std::string part_id;
  std::string distribution_id;
  std::vector<ImageRef> images;
};

/// Directory layout under runs/<run_id>/:
///   run.json          RunRecord
///   inputs.json       images used per (part, distribution)
///   outputs.jsonl     one object per collected cell, append-only
///   holes.json        cells that failed in the latest collect
///   scores.json       derived; rewritten by every score
///   report.{md,csv,json}
///   icl/<round>/descriptions.jsonl
class RunStore {
 public:
  explicit RunStore(std::filesystem::path runs_dir) : root_(std::move(runs_dir)) {}

  const std::filesystem::path& root() const noexcept { return root_; }
  std::filesystem::path run_dir(const std::string& run_id) const;
  bool exists(const std::string& run_id) const;
  /// Throws UnknownRun when the run has no run.json.
  void require(const std::string& run_id) const;
  std::vector<std::string> list_runs() const;

  void write_record(const RunRecord& record) const;
  RunRecord read_record(const std::string& run_id) const;

  void write_inputs(const std::string& run_id, const std::vector<CellInputs>& inputs) const;
  std::vector<CellInputs> read_inputs(const std::string& run_id) const;

  void append_output(const std::string& run_id, const CellRef& cell, const ChatResponse& response) const;
  std::vector<OutputMatrix> read_outputs(const std::string& run_id) const;

  void write_holes(const std::string& run_id, const std::vector<CellRef>& holes) const;
  std::vector<CellRef> read_holes(const std::string& run_id) const;

  void write_artifact(const std::string& run_id, const std::string& name, const std::string& contents) const;
  std::string read_artifact(const std::string& run_id, const std::string& name) const;

 private:
  std::filesystem::path root_;
};

std::string manifest_digest(const Manifest& manifest);
std::string prompt_set_digest(const PromptSet& prompts);

struct CollectOptions {
  std::string run_id;
  std::vector<std::string> distribution_ids;  // empty = every distribution in the manifest
  std::string model_id;
  double temperature = 0.0;
  int max_output_tokens = 1024;
  std::optional<std::uint64_t> seed;  // overrides MixSpec seeds
  std::size_t concurrency = 4;
};

/// Queries the VLM for every (part, distribution, paraphrase) cell not yet in
/// the run store. Successful cells are appended to outputs.jsonl in
/// deterministic order; failed cells are written to holes.json and reported
/// through a PartialRun error after everything else is persisted.
std::vector<OutputMatrix> collect(Gateway& gateway, const RunStore& store, const Manifest& manifest,
                                  const PromptSet& prompts, const CollectOptions& options);

struct ScoreOptions {
  std::string judge_model_id;
  std::string embedding_provider;
  std::size_t concurrency = 4;
};

/// The judge request text for a set of descriptions.
std::string judge_prompt(std::span<const std::string> descriptions);

/// Six consistency values for one part's outputs under one distribution.
MetricMap score_part(Gateway& gateway, const OutputMatrix& matrix, const ScoreOptions& options);

ConsistencyScores score_distribution(Gateway& gateway, std::span<const OutputMatrix> matrices,
                                     const ScoreOptions& options,
                                     std::vector<MetricMap>* per_part = nullptr);

struct DistributionRanking {
  std::vector<std::pair<std::string, double>> order;  // descending by average
  std::string preferred;

  bool operator==(const DistributionRanking&) const = default;
};

nlohmann::json to_json(const DistributionRanking& r);
DistributionRanking ranking_from_json(const nlohmann::json& j);

/// Sorts by average descending; ties go to the lexicographically smaller id.
DistributionRanking rank(std::span<const ConsistencyScores> scores);

enum class ReportFormat { markdown, csv, json };

ReportFormat report_format_from_string(const std::string& name);
std::string extension(ReportFormat format);

std::string render_report(std::span<const ConsistencyScores> scores, const DistributionRanking& ranking,
                          ReportFormat format);

struct ParsedReport {
  std::vector<ConsistencyScores> scores;
  DistributionRanking ranking;
};

ParsedReport parse_json_report(const nlohmann::json& j);

/// Scores every distribution of a completed run and writes scores.json.
/// Refuses runs with holes or incomplete matrices (PartialRun).
ParsedReport score_run(Gateway& gateway, const RunStore& store, const std::string& run_id,
                       const ScoreOptions& options);

/// Reads scores.json back.
ParsedReport load_scores(const RunStore& store, const std::string& run_id);

}  // namespace vlmh
