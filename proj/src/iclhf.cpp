#include "vlmh/iclhf.hpp"

#include <algorithm>
#include <regex>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "vlmh/error.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

namespace {

std::string count_word(std::size_t n) {
  static const char* const kWords[] = {"Zero", "One", "Two",   "Three", "Four", "Five",
                                       "Six",  "Seven", "Eight", "Nine",  "Ten"};
  return n < std::size(kWords) ? kWords[n] : std::to_string(n);
}

// The count shared by every context, or nullopt when they differ.
template <typename Fn>
std::optional<std::size_t> uniform_count(std::span<const IclPartContext> contexts, Fn count) {
  std::optional<std::size_t> n;
  for (const auto& c : contexts) {
    if (n && *n != count(c)) return std::nullopt;
    n = count(c);
  }
  return n;
}

std::string strip_emphasis(std::string s) {
  s = trim(s);
  while (!s.empty() && (s.front() == '*' || s.front() == '_')) s.erase(0, 1);
  while (!s.empty() && (s.back() == '*' || s.back() == '_')) s.pop_back();
  return trim(s);
}

}  // namespace

std::string to_string(BatchStrategy s) {
  switch (s) {
    case BatchStrategy::full: return "full";
    case BatchStrategy::sliding_window: return "sliding_window";
    case BatchStrategy::sequential: return "sequential";
  }
  return "full";
}

BatchStrategy batch_strategy_from_string(const std::string& name) {
  if (name == "full") return BatchStrategy::full;
  if (name == "window" || name == "sliding_window") return BatchStrategy::sliding_window;
  if (name == "seq" || name == "sequential") return BatchStrategy::sequential;
  fail(ErrorKind::PreconditionViolation, "unknown batching strategy: " + name);
}

json to_json(const BatchPlan& plan) {
  json batches = json::array();
  for (const auto& b : plan.batches) batches.push_back({{"batch_index", b.batch_index}, {"part_ids", b.part_ids}});
  json j = {{"strategy", to_string(plan.strategy)}, {"batches", std::move(batches)}};
  j["window"] = plan.window ? json{{"size", plan.window->size}, {"stride", plan.window->stride}} : json(nullptr);
  return j;
}

BatchPlan plan_batches(std::span<const std::string> part_ids, BatchStrategy strategy, std::size_t size,
                       std::size_t stride) {
  BatchPlan plan;
  plan.strategy = strategy;
  const std::size_t n = part_ids.size();
  auto slice = [&](std::size_t begin, std::size_t end) {
    plan.batches.push_back({plan.batches.size(), {part_ids.begin() + static_cast<std::ptrdiff_t>(begin),
                                                  part_ids.begin() + static_cast<std::ptrdiff_t>(end)}});
  };

  switch (strategy) {
    case BatchStrategy::full:
      if (n > 0) slice(0, n);
      break;
    case BatchStrategy::sequential:
      if (size == 0) fail(ErrorKind::InvalidWindow, "batch size must be >= 1");
      for (std::size_t begin = 0; begin < n; begin += size) slice(begin, std::min(n, begin + size));
      break;
    case BatchStrategy::sliding_window:
      if (size == 0 || stride == 0)
        fail(ErrorKind::InvalidWindow, "window size and stride must be >= 1", {{"size", size}, {"stride", stride}});
      if (stride > size)
        fail(ErrorKind::InvalidWindow, fmt::format("stride {} > size {} would skip parts", stride, size),
             {{"size", size}, {"stride", stride}});
      plan.window = BatchPlan::Window{size, stride};
      for (std::size_t begin = 0; begin < n; begin += stride) {
        slice(begin, std::min(n, begin + size));
        if (begin + size >= n) break;
      }
      break;
  }
  return plan;
}

std::string icl_prompt_text(std::span<const IclPartContext> contexts) {
  const auto images = uniform_count(contexts, [](const IclPartContext& c) { return c.images.size(); });
  const auto descs = uniform_count(contexts, [](const IclPartContext& c) { return c.descriptions.size(); });

  std::string text = fmt::format(
      "You are an AI assistant specializing in describing 3D mechanical parts. You will be provided with "
      "information for different parts. For each part, you will receive:\n\n"
      "1. {} images (various perspectives of the part)\n"
      "2. {} descriptions of the part\n"
      "3. Human expert ratings for each description\n\n"
      "Analyze this information and generate improved descriptions. Here's the format for each part:\n\n",
      images ? count_word(*images) : std::string("Several"), descs ? count_word(*descs) : std::string("Several"));

  std::size_t image_number = 1;
  for (std::size_t p = 0; p < contexts.size(); ++p) {
    const auto& ctx = contexts[p];
    text += fmt::format("Part {}\n\n", p + 1);
    for (std::size_t i = 0; i < ctx.images.size(); ++i)
      text += fmt::format("{}[Image {}]", i ? ", " : "", image_number++);
    text += "\n\n";
    for (std::size_t d = 0; d < ctx.descriptions.size(); ++d) {
      const auto& rd = ctx.descriptions[d];
      text += fmt::format("Description {}\n{}\nRelevance: {} Accuracy: {} Detail: {} Fluency: {} Overall: {}\n\n",
                          d + 1, trim(rd.text), rd.rating.relevance, rd.rating.accuracy, rd.rating.detail,
                          rd.rating.fluency, rd.rating.overall);
    }
  }

  text +=
      "According to the ratings, generate an improved description that:\n\n"
      "- Accurately identifies and names the part\n"
      "- Describes its geometric features and shape in detail, referencing specific views from the five images\n"
      "- Explains its likely function or purpose within a larger system or assembly\n"
      "- Maintains consistency with the high-rated aspects of previous descriptions\n"
      "- Improves upon areas that received lower ratings\n"
      "- Integrates information from all provided perspectives\n\n"
      "Your new description should aim to maximize all five rating categories: Relevance, Accuracy, Detail, "
      "Fluency, and Overall Quality.\n\n"
      "Please provide your improved description.\n\n";
  text += fmt::format(
      "Output format: write one improved description for each of the {} part(s) above. Begin each one with a "
      "line of the form \"Part <k>:\" using the same part numbers (Part 1 to Part {}), followed by the "
      "description text.\n",
      contexts.size(), contexts.size());
  return text;
}

ChatRequest build_prompt(std::span<const IclPartContext> contexts, const std::string& model_id,
                         std::size_t image_limit) {
  if (contexts.empty()) fail(ErrorKind::PreconditionViolation, "build_prompt needs at least one part");
  ChatRequest request;
  request.model_id = model_id;
  request.max_output_tokens = 4096;
  for (const auto& ctx : contexts) {
    if (ctx.descriptions.empty())
      fail(ErrorKind::PreconditionViolation, "part " + ctx.part_id + " has no rated descriptions");
    for (const auto& d : ctx.descriptions) {
      for (Criterion c : kAllCriteria) {
        const int v = d.rating.score(c);
        if (v < 1 || v > 5)
          fail(ErrorKind::PreconditionViolation,
               fmt::format("part {} has an incomplete rating ({}={})", ctx.part_id, to_string(c), v));
      }
    }
    request.images.insert(request.images.end(), ctx.images.begin(), ctx.images.end());
  }
  const std::size_t limit = std::min(image_limit, kMaxImagesPerRequest);
  if (request.images.size() > limit) {
    fail(ErrorKind::TooManyImages,
         fmt::format("{} parts carry {} images, above the limit of {}; plan smaller batches", contexts.size(),
                     request.images.size(), limit),
         {{"images", request.images.size()}, {"limit", limit}});
  }
  request.user_text = icl_prompt_text(contexts);
  return request;
}

std::vector<std::string> parse_improved_descriptions(const std::string& response, std::size_t part_count) {
  static const std::regex header(R"(^[\s#>*_]*Part\s+(\d+)\b[*_]*\s*[:.)\-]?[*_]*\s*(.*)$)", std::regex::icase);
  std::map<std::size_t, std::string> sections;
  std::size_t current = 0;
  std::istringstream in(response);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::smatch m;
    if (std::regex_match(line, m, header)) {
      const std::size_t k = std::stoul(m[1].str());
      if (k >= 1 && k <= part_count && !sections.count(k)) {
        current = k;
        sections[k] = m[2].str();
        continue;
      }
    }
    if (current != 0) sections[current] += "\n" + line;
  }
  std::vector<std::string> out;
  for (std::size_t k = 1; k <= part_count; ++k) {
    auto it = sections.find(k);
    std::string text = it == sections.end() ? std::string() : strip_emphasis(it->second);
    if (text.empty())
      fail(ErrorKind::ResponseParseFailure, fmt::format("response has no section for Part {}", k), {{"part", k}});
    out.push_back(std::move(text));
  }
  return out;
}

std::map<std::string, ImprovedDescription> run_icl(Gateway& gateway, const BatchPlan& plan,
                                                   const std::map<std::string, IclPartContext>& contexts,
                                                   const std::string& model_id) {
  for (const auto& b : plan.batches)
    for (const auto& id : b.part_ids)
      if (!contexts.count(id)) fail(ErrorKind::PreconditionViolation, "no ICL context for part " + id);

  std::map<std::string, ImprovedDescription> out;
  for (const auto& batch : plan.batches) {
    std::vector<IclPartContext> ctx;
    for (const auto& id : batch.part_ids) ctx.push_back(contexts.at(id));
    const ChatRequest request = build_prompt(ctx, model_id, gateway.image_limit(model_id));
    const ChatResponse response = gateway.chat(request);
    std::vector<std::string> texts;
    try {
      texts = parse_improved_descriptions(response.text, ctx.size());
    } catch (const Error& e) {
      const std::size_t k = e.details().value("part", std::size_t{0});
      const std::string part_id = k >= 1 && k <= ctx.size() ? ctx[k - 1].part_id : "";
      fail(ErrorKind::ResponseParseFailure,
           fmt::format("batch {}: {} (part_id {})", batch.batch_index, e.what(), part_id),
           {{"batch_index", batch.batch_index}, {"part", k}, {"part_id", part_id}});
    }
    for (std::size_t i = 0; i < ctx.size(); ++i) out[ctx[i].part_id] = {texts[i], batch.batch_index};
  }
  return out;
}

IclContextSet build_contexts(const RunStore& runs, const RatingStore& ratings, const std::string& run_id,
                             const std::string& distribution_id, std::size_t images_per_part,
                             const std::optional<std::string>& rater_id) {
  runs.require(run_id);
  std::map<std::string, std::vector<ImageRef>> inputs;
  for (auto& c : runs.read_inputs(run_id))
    if (c.distribution_id == distribution_id) inputs[c.part_id] = std::move(c.images);

  const auto records = ratings.for_run(run_id);
  IclContextSet set;
  bool any = false;
  for (const auto& m : runs.read_outputs(run_id)) {
    if (m.distribution_id != distribution_id) continue;
    any = true;
    IclPartContext ctx;
    ctx.part_id = m.part_id;
    const auto& images = inputs[m.part_id];
    ctx.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), images_per_part)));
    for (const auto& o : m.outputs) {
      const std::string eid = output_explanation_id(run_id, {m.part_id, m.distribution_id, o.paraphrase_index});
      const auto it = std::find_if(records.begin(), records.end(), [&](const RatingRecord& r) {
        return r.explanation_id == eid && (!rater_id || r.rater_id == *rater_id);
      });
      if (it != records.end()) ctx.descriptions.push_back({o.text, *it});
    }
    if (ctx.descriptions.empty()) set.skipped.push_back(ctx.part_id);
    else set.contexts.push_back(std::move(ctx));
  }
  if (!any)
    fail(ErrorKind::PreconditionViolation, "run " + run_id + " has no outputs for distribution " + distribution_id);
  return set;
}

void write_icl_round(const RunStore& runs, const std::string& run_id, const std::string& round,
                     const BatchPlan& plan, const std::map<std::string, ImprovedDescription>& results,
                     const std::map<std::string, IclPartContext>& contexts, const std::string& model_id) {
  runs.require(run_id);
  if (round.empty() || round == "." || round == ".." || round.find_first_of("/\\") != std::string::npos)
    fail(ErrorKind::PreconditionViolation, "invalid round name: \"" + round + "\"");
  const auto dir = runs.run_dir(run_id) / "icl" / round;
  if (fs::exists(dir / "descriptions.jsonl"))
    fail(ErrorKind::PreconditionViolation, "ICL round " + round + " already exists in run " + run_id);

  std::string body;
  std::set<std::string> written;
  for (const auto& batch : plan.batches) {
    for (const auto& id : batch.part_ids) {
      if (!written.insert(id).second) continue;
      const auto& r = results.at(id);
      json images = json::array();
      for (const auto& img : contexts.at(id).images)
        images.push_back({{"path", img.path.generic_string()}, {"media_type", to_string(img.media_type)}});
      body += json{{"part_id", id}, {"text", r.text}, {"batch_index", r.batch_index}, {"model_id", model_id},
                   {"images", std::move(images)}}
                  .dump() +
              "\n";
    }
  }
  write_file_atomic(dir / "descriptions.jsonl", body);
  write_file_atomic(dir / "plan.json", to_json(plan).dump(2) + "\n");
}

}  // namespace vlmh
