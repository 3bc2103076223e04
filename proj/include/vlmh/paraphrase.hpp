#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace vlmh {

class Gateway;

enum class Provenance { generated, manual, mixed };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& name);

inline constexpr std::size_t kDefaultParaphraseCount = 3;

/// The CAD description request every paraphrase set starts from.
extern const char* const kDefaultBasePrompt;

struct PromptSet {
  std::string base_prompt;
  std::vector<std::string> paraphrases;
  bool approved = false;
  Provenance provenance = Provenance::generated;

  bool operator==(const PromptSet&) const = default;
};

/// Throws ParseFailure when two paraphrases coincide or one repeats the base.
void check_distinct(const PromptSet& set);

nlohmann::json to_json(const PromptSet& set);
PromptSet prompt_set_from_json(const nlohmann::json& j);

PromptSet load_prompt_set(const std::filesystem::path& path);
void save_prompt_set(const std::filesystem::path& path, const PromptSet& set);

/// The generation request text for `count` paraphrases of `base_prompt`.
std::string paraphrase_request_text(const std::string& base_prompt, std::size_t count);

/// Extracts items 1..count from an enumerated answer. Accepts "1.", "1)" and
/// "[Paraphrase 1]" markers; lines without a marker continue the previous
/// item. Throws ParseFailure for missing or duplicated items.
std::vector<std::string> parse_paraphrases(const std::string& response, const std::string& base_prompt,
                                           std::size_t count);

PromptSet generate_paraphrases(Gateway& gateway, const std::string& model_id, const std::string& base_prompt,
                               std::size_t count = kDefaultParaphraseCount, double temperature = 0.0);

using ParaphraseEdit = std::pair<std::size_t, std::string>;

/// Applies manual replacements and marks the set approved.
PromptSet approve(PromptSet set, const std::vector<ParaphraseEdit>& edits = {});

}  // namespace vlmh
