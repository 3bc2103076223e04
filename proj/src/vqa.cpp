#include "vlmh/vqa.hpp"

#include <algorithm>
#include <cctype>
#include <regex>
#include <set>

#include <fmt/format.h>

#include "vlmh/error.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::optional<std::string> match_label(const std::string& token, std::span<const std::string> labels,
                                       bool case_insensitive) {
  for (const auto& l : labels)
    if (l == token) return l;
  if (case_insensitive) {
    const auto t = lower(token);
    for (const auto& l : labels)
      if (lower(l) == t) return l;
  }
  return std::nullopt;
}

MediaType media_type_of(const fs::path& path) {
  const std::string head = read_file(path).substr(0, 8);
  if (auto t = sniff_media_type(head)) return *t;
  fail(ErrorKind::ParseError, path.string() + " is neither PNG nor JPEG");
}

}  // namespace

std::vector<std::string> VqaItem::labels() const {
  std::vector<std::string> out;
  for (const auto& o : options) out.push_back(o.label);
  return out;
}

json to_json(const VqaResult& r) {
  return {{"item_id", r.item_id},
          {"model_id", r.model_id},
          {"raw_response", r.raw_response},
          {"extracted_label", r.extracted_label ? json(*r.extracted_label) : json(nullptr)},
          {"correct", r.correct},
          {"flagged", r.flagged()}};
}

VqaResult vqa_result_from_json(const json& j) {
  try {
    VqaResult r;
    r.item_id = j.at("item_id").get<std::string>();
    r.model_id = j.value("model_id", std::string());
    r.raw_response = j.value("raw_response", std::string());
    if (j.contains("extracted_label") && !j.at("extracted_label").is_null())
      r.extracted_label = j.at("extracted_label").get<std::string>();
    r.correct = j.at("correct").get<bool>();
    if (r.correct && !r.extracted_label)
      fail(ErrorKind::ParseError, "result " + r.item_id + " is marked correct without an extracted label");
    return r;
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("malformed VQA result: ") + e.what());
  }
}

std::vector<VqaItem> load_vqa(const fs::path& path) {
  const auto base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::vector<VqaItem> items;
  std::set<std::string> ids;
  std::size_t line = 0;
  for (const auto& row : read_jsonl(path)) {
    ++line;
    VqaItem item;
    try {
      item.item_id = row.at("item_id").get<std::string>();
      item.part_id = row.at("part_id").get<std::string>();
      item.question = row.at("question").get<std::string>();
      item.answer_label = row.at("answer_label").get<std::string>();
      for (const auto& o : row.at("options"))
        item.options.push_back({o.at("label").get<std::string>(), o.at("text").get<std::string>()});
      for (const auto& p : row.at("images")) {
        const fs::path resolved = (base / p.get<std::string>()).lexically_normal();
        if (!fs::exists(resolved))
          fail(ErrorKind::MissingImage, "image not found: " + resolved.string(), {{"path", resolved.string()}});
        item.images.push_back({resolved, media_type_of(resolved)});
      }
    } catch (const json::exception& e) {
      fail(ErrorKind::ParseError, fmt::format("{} item {}: {}", path.string(), line, e.what()));
    }
    if (item.item_id.empty()) fail(ErrorKind::ParseError, fmt::format("{} item {}: empty item_id", path.string(), line));
    if (item.options.size() < 2)
      fail(ErrorKind::ParseError, "item " + item.item_id + " needs at least two options");
    const auto labels = item.labels();
    if (std::set<std::string>(labels.begin(), labels.end()).size() != labels.size())
      fail(ErrorKind::ParseError, "item " + item.item_id + " repeats an option label");
    if (std::find(labels.begin(), labels.end(), item.answer_label) == labels.end())
      fail(ErrorKind::AnswerNotInOptions,
           fmt::format("item {}: answer {} is not among its option labels", item.item_id, item.answer_label),
           {{"item_id", item.item_id}, {"answer_label", item.answer_label}});
    if (!ids.insert(item.item_id).second)
      fail(ErrorKind::DuplicateItemId, "duplicate item_id: " + item.item_id, {{"item_id", item.item_id}});
    items.push_back(std::move(item));
  }
  return items;
}

std::string vqa_prompt_text(const VqaItem& item) {
  std::string text = "Question: " + item.question + "\n\nOptions:\n";
  for (const auto& o : item.options) text += o.label + ") " + o.text + "\n";
  text += "\nRespond with only the letter of the correct option.";
  return text;
}

std::optional<std::string> extract_label(const std::string& response, std::span<const std::string> labels) {
  static const std::regex answer_phrase(
      R"(answer\s*(?:is|:|-)?\s*(?:option\s+)?[*_]*\s*[\(\[]?([A-Za-z0-9]+)\b)", std::regex::icase);
  static const std::regex paren(R"(\(([A-Za-z0-9]+)\))");
  static const std::regex leading(R"((?:^|\n)[\s*_]*([A-Za-z0-9]+)\s*\))");
  static const std::regex token(R"([A-Za-z0-9]+)");

  for (auto it = std::sregex_iterator(response.begin(), response.end(), answer_phrase); it != std::sregex_iterator(); ++it)
    if (auto l = match_label((*it)[1].str(), labels, true)) return l;

  // Whichever of "(X)" / "X)" appears first.
  std::optional<std::pair<std::ptrdiff_t, std::string>> marked;
  for (const auto* re : {&paren, &leading}) {
    for (auto it = std::sregex_iterator(response.begin(), response.end(), *re); it != std::sregex_iterator(); ++it) {
      if (auto l = match_label((*it)[1].str(), labels, true)) {
        if (!marked || it->position(1) < marked->first) marked = {{it->position(1), *l}};
        break;
      }
    }
  }
  if (marked) return marked->second;

  for (auto it = std::sregex_iterator(response.begin(), response.end(), token); it != std::sregex_iterator(); ++it)
    if (auto l = match_label(it->str(), labels, false)) return l;

  std::string bare = trim(response);
  while (!bare.empty() && std::ispunct(static_cast<unsigned char>(bare.back()))) bare.pop_back();
  while (!bare.empty() && std::ispunct(static_cast<unsigned char>(bare.front()))) bare.erase(0, 1);
  return match_label(bare, labels, true);
}

VqaResult grade(const VqaItem& item, const std::string& model_id, const std::string& response) {
  VqaResult r;
  r.item_id = item.item_id;
  r.model_id = model_id;
  r.raw_response = response;
  const auto labels = item.labels();
  r.extracted_label = extract_label(response, labels);
  r.correct = r.extracted_label && *r.extracted_label == item.answer_label;
  return r;
}

VqaResult ask(Gateway& gateway, const VqaItem& item, const std::string& model_id) {
  ChatRequest request;
  request.model_id = model_id;
  request.user_text = vqa_prompt_text(item);
  request.images = item.images;
  request.temperature = 0.0;
  request.max_output_tokens = 64;
  return grade(item, model_id, gateway.chat(request).text);
}

std::vector<VqaResult> ask_all(Gateway& gateway, std::span<const VqaItem> items, const std::string& model_id,
                               std::size_t concurrency) {
  std::vector<VqaResult> results(items.size());
  for_each_bounded(items.size(), concurrency, [&](std::size_t i) {
    try {
      results[i] = ask(gateway, items[i], model_id);
    } catch (const Error& e) {
      results[i] = VqaResult{items[i].item_id, model_id, fmt::format("{}: {}", kind_name(e.kind()), e.what()),
                             std::nullopt, false};
    }
  });
  return results;
}

std::string VqaScore::accuracy_text() const {
  return fmt::format("{}.{:02}", accuracy_centipercent / 100, accuracy_centipercent % 100);
}

long long percent_half_even_centi(std::size_t k, std::size_t n) {
  if (n == 0) fail(ErrorKind::EmptyInput, "accuracy over zero items");
  const unsigned long long num = 10000ULL * k;
  unsigned long long q = num / n;
  const unsigned long long r = num % n;
  if (2 * r > n || (2 * r == n && (q % 2 == 1))) ++q;
  return static_cast<long long>(q);
}

VqaScore score(std::span<const VqaResult> results) {
  if (results.empty()) fail(ErrorKind::EmptyInput, "no VQA results to score");
  VqaScore s;
  s.total = results.size();
  for (const auto& r : results) {
    if (r.correct) ++s.correct;
    if (r.flagged()) ++s.unparsed;
  }
  s.accuracy_centipercent = percent_half_even_centi(s.correct, s.total);
  return s;
}

std::string render_leaderboard(std::vector<LeaderboardRow> rows, ReportFormat format) {
  std::stable_sort(rows.begin(), rows.end(), [](const LeaderboardRow& a, const LeaderboardRow& b) {
    if (a.score.accuracy_centipercent != b.score.accuracy_centipercent)
      return a.score.accuracy_centipercent > b.score.accuracy_centipercent;
    return a.model_id < b.model_id;
  });
  if (format == ReportFormat::json) {
    json arr = json::array();
    for (const auto& r : rows) {
      arr.push_back({{"model_id", r.model_id},
                     {"accuracy_percent", r.score.accuracy_percent()},
                     {"correct", r.score.correct},
                     {"total", r.score.total},
                     {"unparsed", r.score.unparsed}});
    }
    return arr.dump(2) + "\n";
  }
  std::string out;
  if (format == ReportFormat::csv) {
    out = "Model,Accuracy (%),Correct,Total,Unparsed\r\n";
    for (const auto& r : rows) {
      const bool quote = r.model_id.find_first_of(",\"\r\n") != std::string::npos;
      std::string name = r.model_id;
      if (quote) {
        std::string q = "\"";
        for (char c : name) q += c == '"' ? std::string("\"\"") : std::string(1, c);
        name = q + "\"";
      }
      out += fmt::format("{},{},{},{},{}\r\n", name, r.score.accuracy_text(), r.score.correct, r.score.total,
                         r.score.unparsed);
    }
    return out;
  }
  out = "| Model | Accuracy (%) | Correct | Total | Unparsed |\n|---|---:|---:|---:|---:|\n";
  for (const auto& r : rows)
    out += fmt::format("| {} | {} | {} | {} | {} |\n", r.model_id, r.score.accuracy_text(), r.score.correct,
                       r.score.total, r.score.unparsed);
  return out;
}

void save_vqa_results(const fs::path& path, std::span<const VqaResult> results) {
  std::string body;
  for (const auto& r : results) body += to_json(r).dump() + "\n";
  write_file_atomic(path, body);
}

std::vector<VqaResult> load_vqa_results(const fs::path& path) {
  std::vector<VqaResult> out;
  for (const auto& row : read_jsonl(path)) out.push_back(vqa_result_from_json(row));
  return out;
}

}  // namespace vlmh
