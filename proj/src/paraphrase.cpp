#include "vlmh/paraphrase.hpp"

#include <map>
#include <regex>
#include <sstream>

#include <fmt/format.h>

#include "vlmh/error.hpp"
#include "vlmh/gateway.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

const char* const kDefaultBasePrompt =
    "Please analyze the object shown in the image. Note that in some images, the 3D part might appear red "
    "when shown in an assembly format, while in others, it might look grey when presented as an individual "
    "part. Provide a detailed explanation of the object's name or type, its geometric features and shape, and "
    "its likely function or purpose within a larger system or assembly. Be as specific and comprehensive as "
    "possible in your description.";

namespace {

std::string strip_decoration(std::string s) {
  s = trim(s);
  for (bool changed = true; changed && s.size() >= 2;) {
    changed = false;
    // Bold markers may be split from their partner by the item marker ("**2.** text**").
    if (s.rfind("**", 0) == 0) {
      s = trim(s.substr(2));
      changed = true;
    } else if (s.size() >= 2 && s.compare(s.size() - 2, 2, "**") == 0) {
      s = trim(s.substr(0, s.size() - 2));
      changed = true;
    } else if (s.front() == '"' && s.back() == '"') {
      s = trim(s.substr(1, s.size() - 2));
      changed = true;
    } else if (s.rfind("“", 0) == 0 && s.size() >= 6 && s.compare(s.size() - 3, 3, "”") == 0) {
      s = trim(s.substr(3, s.size() - 6));
      changed = true;
    }
  }
  return s;
}

}  // namespace

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::generated: return "generated";
    case Provenance::manual: return "manual";
    case Provenance::mixed: return "mixed";
  }
  return "generated";
}

Provenance provenance_from_string(const std::string& name) {
  if (name == "generated") return Provenance::generated;
  if (name == "manual") return Provenance::manual;
  if (name == "mixed") return Provenance::mixed;
  fail(ErrorKind::ParseError, "unknown provenance: " + name);
}

void check_distinct(const PromptSet& set) {
  for (std::size_t i = 0; i < set.paraphrases.size(); ++i) {
    if (set.paraphrases[i] == set.base_prompt)
      fail(ErrorKind::ParseFailure, fmt::format("paraphrase {} repeats the base prompt verbatim", i + 1),
           {{"index", i}});
    for (std::size_t j = 0; j < i; ++j) {
      if (set.paraphrases[i] == set.paraphrases[j])
        fail(ErrorKind::ParseFailure, fmt::format("duplicate paraphrase: item {} equals item {}", i + 1, j + 1),
             {{"index", i}, {"duplicate_of", j}});
    }
  }
}

nlohmann::json to_json(const PromptSet& set) {
  return {{"base_prompt", set.base_prompt},
          {"paraphrases", set.paraphrases},
          {"approved", set.approved},
          {"provenance", to_string(set.provenance)}};
}

PromptSet prompt_set_from_json(const nlohmann::json& j) {
  try {
    PromptSet set;
    set.base_prompt = j.at("base_prompt").get<std::string>();
    set.paraphrases = j.at("paraphrases").get<std::vector<std::string>>();
    set.approved = j.at("approved").get<bool>();
    set.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    return set;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ParseError, std::string("malformed prompt set: ") + e.what());
  }
}

PromptSet load_prompt_set(const std::filesystem::path& path) {
  return prompt_set_from_json(read_json_file(path));
}

void save_prompt_set(const std::filesystem::path& path, const PromptSet& set) {
  write_file_atomic(path, to_json(set).dump(2) + "\n");
}

std::string paraphrase_request_text(const std::string& base_prompt, std::size_t count) {
  std::string text = fmt::format(
      "Please generate {} paraphrases of the following prompt. Each paraphrase should maintain the same core "
      "meaning but vary in phrasing and complexity. Ensure a mix of minor variations (e.g., word order changes, "
      "synonym substitution) and more significant restructuring. The paraphrases should be diverse enough to "
      "test a language model's robustness to input variations, but not so different that they alter the "
      "fundamental query.\n\n"
      "Original prompt:\n\n"
      "\"{}\"\n\n"
      "Generate your {} paraphrases below:\n\n",
      count, base_prompt, count);
  for (std::size_t i = 1; i <= count; ++i) text += fmt::format("{}. [Paraphrase {}]\n", i, i);
  return text;
}

std::vector<std::string> parse_paraphrases(const std::string& response, const std::string& base_prompt,
                                           std::size_t count) {
  // "1." / "1)" optionally followed by "[Paraphrase 1]" / "[Paraphrase 1]:" alone.
  static const std::regex marker(
      R"(^\s*(?:[-*]\s+)?(?:\*\*)?(?:(\d+)\s*[.)](?:\*\*)?\s*(?:\[Paraphrase\s+\d+\]\s*:?)?|\[Paraphrase\s+(\d+)\]\s*:?)(?:\*\*)?\s*(.*)$)",
      std::regex::icase);

  std::map<std::size_t, std::string> items;
  std::size_t current = 0;
  std::string line;
  std::istringstream in(response);
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::smatch m;
    if (std::regex_match(line, m, marker)) {
      const std::size_t n = std::stoul(m[1].matched ? m[1].str() : m[2].str());
      if (items.count(n)) {
        current = 0;  // a repeated number ends collection for that slot
        continue;
      }
      current = n;
      items[n] = m[3].str();
    } else if (current != 0 && !trim(line).empty()) {
      auto& text = items[current];
      text += text.empty() ? trim(line) : " " + trim(line);
    }
  }

  PromptSet probe{base_prompt, {}, false, Provenance::generated};
  for (std::size_t i = 1; i <= count; ++i) {
    auto it = items.find(i);
    const std::string text = it == items.end() ? std::string() : strip_decoration(it->second);
    if (text.empty()) {
      fail(ErrorKind::ParseFailure,
           fmt::format("expected {} enumerated paraphrases, item {} is missing", count, i),
           {{"expected", count}, {"missing", i}});
    }
    probe.paraphrases.push_back(text);
  }
  check_distinct(probe);
  return probe.paraphrases;
}

PromptSet generate_paraphrases(Gateway& gateway, const std::string& model_id, const std::string& base_prompt,
                               std::size_t count, double temperature) {
  if (trim(base_prompt).empty()) fail(ErrorKind::PreconditionViolation, "base prompt is empty");
  if (count == 0) fail(ErrorKind::PreconditionViolation, "paraphrase count must be positive");
  ChatRequest request;
  request.model_id = model_id;
  request.user_text = paraphrase_request_text(base_prompt, count);
  request.temperature = temperature;
  request.max_output_tokens = 2048;
  ChatResponse response;
  try {
    response = gateway.chat(request);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::PreconditionViolation) throw;
    throw Error(ErrorKind::GatewayError, std::string("paraphrase generation failed: ") + e.what(),
                {{"cause", std::string(kind_name(e.kind()))}});
  }
  return {base_prompt, parse_paraphrases(response.text, base_prompt, count), false, Provenance::generated};
}

PromptSet approve(PromptSet set, const std::vector<ParaphraseEdit>& edits) {
  for (const auto& [index, text] : edits) {
    if (index >= set.paraphrases.size())
      fail(ErrorKind::IndexOutOfRange,
           fmt::format("edit index {} out of range for {} paraphrases", index, set.paraphrases.size()),
           {{"index", index}, {"count", set.paraphrases.size()}});
  }
  for (const auto& [index, text] : edits) set.paraphrases[index] = trim(text);
  if (!edits.empty() && set.provenance != Provenance::manual) set.provenance = Provenance::mixed;
  check_distinct(set);
  set.approved = true;
  return set;
}

}  // namespace vlmh
