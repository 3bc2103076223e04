#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmh/corpus.hpp"
#include "vlmh/experiment.hpp"
#include "vlmh/gateway.hpp"
#include "vlmh/ratings.hpp"

namespace vlmh {

inline constexpr std::size_t kIclImagesPerPart = 5;

struct RatedDescription {
  std::string text;
  RatingRecord rating;
};

struct IclPartContext {
  std::string part_id;
  std::vector<ImageRef> images;
  std::vector<RatedDescription> descriptions;
};

enum class BatchStrategy { full, sliding_window, sequential };

std::string to_string(BatchStrategy s);
/// Accepts "full", "window"/"sliding_window", "seq"/"sequential".
BatchStrategy batch_strategy_from_string(const std::string& name);

struct Batch {
  std::size_t batch_index = 0;
  std::vector<std::string> part_ids;

  bool operator==(const Batch&) const = default;
};

struct BatchPlan {
  struct Window {
    std::size_t size = 0;
    std::size_t stride = 0;
    bool operator==(const Window&) const = default;
  };

  BatchStrategy strategy = BatchStrategy::full;
  std::vector<Batch> batches;
  std::optional<Window> window;

  bool operator==(const BatchPlan&) const = default;
};

nlohmann::json to_json(const BatchPlan& plan);

/// full: one batch. sequential: consecutive disjoint chunks of `size`.
/// sliding_window: windows start at 0, stride, 2*stride, ... and stop once a
/// window reaches the last part; the last one may be shorter than `size`.
/// Throws InvalidWindow for size == 0, stride == 0 or stride > size.
BatchPlan plan_batches(std::span<const std::string> part_ids, BatchStrategy strategy, std::size_t size,
                       std::size_t stride);

/// User text of the in-context learning request, including the trailing
/// instruction that asks for "Part <k>:" headed sections.
std::string icl_prompt_text(std::span<const IclPartContext> contexts);

/// One request carrying every context's images in part order. Throws
/// TooManyImages when they exceed `image_limit`.
ChatRequest build_prompt(std::span<const IclPartContext> contexts, const std::string& model_id,
                         std::size_t image_limit = kMaxImagesPerRequest);

/// Splits a reply into `part_count` sections headed "Part 1" .. "Part N".
std::vector<std::string> parse_improved_descriptions(const std::string& response, std::size_t part_count);

struct ImprovedDescription {
  std::string text;
  std::size_t batch_index = 0;
};

/// Executes the plan batch by batch. When windows overlap, a part keeps the
/// description from the last window that contains it.
std::map<std::string, ImprovedDescription> run_icl(Gateway& gateway, const BatchPlan& plan,
                                                   const std::map<std::string, IclPartContext>& contexts,
                                                   const std::string& model_id);

struct IclContextSet {
  std::vector<IclPartContext> contexts;  // run part order
  std::vector<std::string> skipped;      // parts with no rated description
};

/// Collects images and rated descriptions for every part of `distribution_id`
/// in a run. When several raters rated a description, `rater_id` selects
/// one; otherwise the earliest rating is used.
IclContextSet build_contexts(const RunStore& runs, const RatingStore& ratings, const std::string& run_id,
                             const std::string& distribution_id, std::size_t images_per_part = kIclImagesPerPart,
                             const std::optional<std::string>& rater_id = std::nullopt);

/// Writes runs/<run_id>/icl/<round>/descriptions.jsonl. Rounds are never
/// overwritten.
void write_icl_round(const RunStore& runs, const std::string& run_id, const std::string& round,
                     const BatchPlan& plan, const std::map<std::string, ImprovedDescription>& results,
                     const std::map<std::string, IclPartContext>& contexts, const std::string& model_id);

}  // namespace vlmh
