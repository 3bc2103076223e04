#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmh/corpus.hpp"
#include "vlmh/experiment.hpp"
#include "vlmh/metrics.hpp"

namespace vlmh {

enum class Criterion { relevance, accuracy, detail, fluency, overall };

inline constexpr std::array<Criterion, 5> kAllCriteria = {Criterion::relevance, Criterion::accuracy,
                                                          Criterion::detail, Criterion::fluency,
                                                          Criterion::overall};

std::string to_string(Criterion c);
/// "Relevance", ..., "Overall Quality".
std::string display_name(Criterion c);

enum class Phase { before_iclhf, after_iclhf };

std::string to_string(Phase p);
Phase phase_from_string(const std::string& name);

struct RatingRecord {
  std::string rating_id;
  std::string part_id;
  std::string explanation_id;
  std::string rater_id;
  int relevance = 0;
  int accuracy = 0;
  int detail = 0;
  int fluency = 0;
  int overall = 0;
  std::optional<std::string> comment;
  std::string created_at;

  int score(Criterion c) const;

  bool operator==(const RatingRecord&) const = default;
};

nlohmann::json to_json(const RatingRecord& r);
/// Accepts records without rating_id/created_at (the store assigns them).
RatingRecord rating_record_from_json(const nlohmann::json& j);

struct RatingSummary {
  std::map<Criterion, MeanStd> per_criterion;
  Phase phase = Phase::before_iclhf;
  std::size_t sample_count = 0;
};

nlohmann::json to_json(const RatingSummary& s);

/// Population mean/std per criterion. Throws EmptyInput.
RatingSummary summarize(std::span<const RatingRecord> records, Phase phase);

/// Table with one row per criterion and a column per summary, cells
/// formatted "mean±std" to two decimals.
std::string render_rating_table(std::span<const RatingSummary> summaries, ReportFormat format);

// Explanation ids:
//   <run_id>/<part_id>/<distribution_id>/<paraphrase_index>   collected output
//   <run_id>/icl/<round>/<part_id>                             ICL-HF rewrite
std::string output_explanation_id(const std::string& run_id, const CellRef& cell);
std::string icl_explanation_id(const std::string& run_id, const std::string& round, const std::string& part_id);
std::string run_of(const std::string& explanation_id);
Phase phase_of(const std::string& explanation_id);

struct Explanation {
  std::string explanation_id;
  std::string part_id;
  std::string text;
  std::vector<ImageRef> images;
  Phase phase = Phase::before_iclhf;
};

/// Every ratable explanation in a run: collected outputs first, then each ICL
/// round in name order. Throws UnknownRun.
std::vector<Explanation> list_explanations(const RunStore& store, const std::string& run_id);

/// Images of a part in a run, deduplicated by path in first-use order. This is
/// the index space of GET /api/images/<part_id>/<n>.
std::vector<ImageRef> part_images(const RunStore& store, const std::string& run_id, const std::string& part_id);

/// Append-only JSONL store with an in-memory index. Writes are serialized;
/// readers get copies.
class RatingStore {
 public:
  explicit RatingStore(std::filesystem::path file);

  /// Validates, assigns rating_id/created_at when absent, persists, and
  /// returns the id. Throws ScoreOutOfRange, UnknownExplanation or
  /// DuplicateRating.
  std::string submit(RatingRecord record, const RunStore& runs);

  std::optional<RatingRecord> get(const std::string& rating_id) const;
  std::vector<RatingRecord> all() const;
  std::vector<RatingRecord> for_run(const std::string& run_id) const;
  bool has(const std::string& explanation_id, const std::string& rater_id) const;

  const std::filesystem::path& file() const noexcept { return file_; }

 private:
  std::filesystem::path file_;
  mutable std::mutex mutex_;
  std::vector<RatingRecord> records_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

struct PendingItem {
  std::string explanation_id;
  std::string part_id;
  std::string text;
  std::vector<std::size_t> image_indices;  // into part_images(run, part)
};

std::vector<PendingItem> list_pending(const RunStore& runs, const RatingStore& ratings, const std::string& rater_id,
                                      const std::string& run_id);

/// HTTP front end for the rating UI. See README for the endpoint list.
class RatingService {
 public:
  RatingService(RunStore runs, RatingStore& ratings, std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~RatingService();

  RatingService(const RatingService&) = delete;
  RatingService& operator=(const RatingService&) = delete;

  /// Binds and serves until stop(); returns false if the bind failed.
  bool listen(const std::string& host, int port);
  /// Binds to an ephemeral port and returns it (or -1).
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace vlmh
