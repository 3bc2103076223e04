// Regenerates fixtures/{prompts,cache,ratings.jsonl} by running the full
// pipeline in record mode against a deterministic stand-in model. Tests then
// replay the cache without any network access.
//
//   make_fixtures [fixture_dir]

#include <array>
#include <iostream>
#include <map>
#include <regex>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "vlmh/config.hpp"
#include "vlmh/corpus.hpp"
#include "vlmh/error.hpp"
#include "vlmh/experiment.hpp"
#include "vlmh/iclhf.hpp"
#include "vlmh/metrics.hpp"
#include "vlmh/paraphrase.hpp"
#include "vlmh/ratings.hpp"
#include "vlmh/util.hpp"
#include "vlmh/vqa.hpp"

using namespace vlmh;

namespace {

struct PartFacts {
  std::array<std::string, 3> names;
  std::array<std::string, 4> features;
  std::array<std::string, 3> functions;
};

const std::map<std::string, PartFacts> kFacts = {
    {"bracket-01",
     {{"L-shaped mounting bracket", "angle bracket", "right-angle support plate"},
      {"two perpendicular flanges of equal thickness", "a single through hole near the end of the base flange",
       "rounded outer corners", "a short vertical web"},
      {"fastens a housing to a machine frame", "supports a shelf or cover plate",
       "stiffens the joint between two panels"}}},
    {"flange-02",
     {{"circular pipe flange", "bolted ring flange", "round coupling plate"},
      {"a large central bore", "four evenly spaced bolt holes on a pitch circle", "a flat raised face",
       "a thin outer rim"},
      {"joins two pipe sections with bolts", "mounts a valve onto a pipeline", "closes the end of a duct"}}},
};

// How much each distribution lets the stand-in model drift between prompts.
// The mixed set is the steadiest, matching the ranking the harness should find.
int drift(const std::string& dist) {
  if (dist == "D") return 0;
  if (dist == "A") return 1;
  return 2;
}

std::string describe(const std::string& part, const std::string& dist, std::size_t para) {
  const auto& f = kFacts.at(part);
  const int d = drift(dist);
  const std::size_t i = para % 3;
  const std::string& name = d >= 2 ? f.names[i] : f.names[0];
  std::string feats;
  if (d == 0) {
    feats = f.features[0] + ", " + f.features[1] + " and " + f.features[2];
  } else {
    feats = f.features[i] + ", " + f.features[(i + 1) % 4] + " and " + f.features[(i + 2) % 4];
  }
  const std::string& use = d >= 2 ? f.functions[i] : f.functions[0];
  std::string view = dist == "C" ? " The views are slightly blurred." : "";
  std::string lead = d == 0 ? "The object is a " : std::array<std::string, 3>{"The object is a ", "This appears to be a ", "Shown here is a "}[i];
  if (d == 0 && i == 2) lead = "The object shown is a ";
  return fmt::format("{}{}. It has {}. It most likely {}.{}", lead, name, feats, use, view);
}

class StandInModel final : public Transport {
 public:
  StandInModel(const Manifest& manifest, const std::map<std::string, std::string>& vqa_answers)
      : vqa_answers_(vqa_answers) {
    for (const auto& part : manifest.parts)
      for (const auto& [dist, images] : part.distributions)
        for (const auto& img : images) image_owner_[data_url(img)] = {part.part_id, dist};
  }

  void set_paraphrases(std::vector<std::string> p) { paraphrases_ = std::move(p); }

  HttpResponse post(const HttpRequest& request) override {
    const json body = json::parse(request.body);
    if (request.path == "/v1/embeddings") {
      json resp = {{"data", json::array({{{"embedding", embed(body.at("input").get<std::string>())}}})}};
      return {200, resp.dump(), ""};
    }
    const auto& content = body.at("messages").back().at("content");
    const std::string text = content.at(0).at("text").get<std::string>();
    std::vector<std::string> urls;
    for (std::size_t k = 1; k < content.size(); ++k) urls.push_back(content[k].at("image_url").at("url"));
    const std::string reply = respond(body.at("model").get<std::string>(), text, urls);
    json resp = {{"model", body.at("model")},
                 {"choices", json::array({{{"message", {{"role", "assistant"}, {"content", reply}}},
                                           {"finish_reason", "stop"}}})},
                 {"usage", {{"prompt_tokens", static_cast<int>(text.size() / 4)},
                            {"completion_tokens", static_cast<int>(reply.size() / 4)}}}};
    return {200, resp.dump(), ""};
  }

 private:
  static std::string data_url(const ImageRef& img) {
    const std::string mime = img.media_type == MediaType::png ? "image/png" : "image/jpeg";
    return "data:" + mime + ";base64," + base64_encode(read_file(img.path));
  }

  static json embed(const std::string& text) {
    std::vector<double> v(16, 0.05);
    for (const auto& tok : tokenize(text).tokens) v[std::stoul(sha256_hex(tok).substr(0, 8), nullptr, 16) % 16] += 1.0;
    return v;
  }

  std::string respond(const std::string& model, const std::string& text, const std::vector<std::string>& urls) {
    if (text.starts_with("Please generate "))
      return "Here are the paraphrases:\n\n"
             "1. Examine the object in the image. In some images the 3D part may be red because it is shown "
             "inside an assembly, and in others it may be grey because it is shown alone. Explain in detail what "
             "the object is called, what its geometry and shape look like, and what role it likely plays in a "
             "larger system or assembly.\n"
             "2. Look at the pictured object and describe it as thoroughly as you can: its name or type, its "
             "geometric features and overall shape, and its probable purpose in a bigger assembly. Keep in mind "
             "that the part can appear red when displayed within an assembly and grey when displayed on its own.\n"
             "3. Identify the object in the image and give a comprehensive, specific account of its type, shape "
             "and geometric features, and the function it most likely serves within a larger system. The part may "
             "be rendered red in assembly views and grey in standalone views.\n";
    if (text.starts_with("You are tasked with evaluating")) return judge(text);
    if (text.starts_with("You are an AI assistant specializing")) return improve(text);
    if (text.starts_with("Question: ")) return vqa_answers_.at(model + "|" + text.substr(10, text.find('\n') - 10));

    const auto owner = image_owner_.at(urls.at(0));
    const std::string dist = urls.size() == 5 ? "D" : owner.second;
    for (std::size_t i = 0; i < paraphrases_.size(); ++i)
      if (paraphrases_[i] == text) return describe(owner.first, dist, i);
    throw Error(ErrorKind::PreconditionViolation, "stand-in model got an unexpected prompt");
  }

  static std::string judge(const std::string& text) {
    static const std::regex item(R"(^\d+\. (.+)$)", std::regex::multiline);
    const auto from = text.find("Descriptions to evaluate:");
    std::vector<std::string> descs;
    for (auto it = std::sregex_iterator(text.begin() + static_cast<std::ptrdiff_t>(from), text.end(), item);
         it != std::sregex_iterator(); ++it)
      descs.push_back((*it)[1].str());
    const double s = lexical_consistency(descs, MetricId::rouge1);
    const double score = std::round(s * 20.0) / 20.0;
    return fmt::format("[Score]: {:.2f}\n[Explanation]: The descriptions {} on the part's name and function, "
                       "with {} differences in the listed features.",
                       score, score >= 0.8 ? "agree" : "partly disagree", score >= 0.8 ? "minor" : "noticeable");
  }

  static std::string improve(const std::string& text) {
    static const std::regex first_desc(R"(Description 1\n([^\n]+)\n)");
    std::string reply;
    std::size_t k = 1;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), first_desc); it != std::sregex_iterator(); ++it, ++k)
      reply += fmt::format("Part {}:\n{} Viewed from all five perspectives, the edges and holes line up with a "
                           "machined metal part.\n\n",
                           k, (*it)[1].str());
    return reply;
  }

  std::map<std::string, std::pair<std::string, std::string>> image_owner_;
  std::map<std::string, std::string> vqa_answers_;
  std::vector<std::string> paraphrases_;
};

RatingRecord rating(const std::string& eid, const std::string& part, std::array<int, 5> s,
                    const std::string& created_at) {
  RatingRecord r;
  r.part_id = part;
  r.explanation_id = eid;
  r.rater_id = "expert";
  r.relevance = s[0];
  r.accuracy = s[1];
  r.detail = s[2];
  r.fluency = s[3];
  r.overall = s[4];
  r.created_at = created_at;
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path dir = argc > 1 ? argv[1] : "fixtures";
  try {
    for (const char* stale : {"cache", "prompts", "runs"}) fs::remove_all(dir / stale);
    fs::remove(dir / "ratings.jsonl");

    auto cfg = load_config(dir / "harness.json");
    const auto manifest = load_manifest(cfg.manifest);
    const auto vqa_items = load_vqa(dir / "vqa" / "dataset.jsonl");

    // model|question -> reply
    const std::map<std::string, std::array<std::string, 2>> replies = {
        {"q1", {"Answer: B", "B"}},
        {"q2", {"(C) There are four bolt holes.", "The answer is D"}},
        {"q3", {"K) A through hole", "K"}},
        {"q4", {"I cannot determine this from the images.", "a"}},
        {"q5", {"B", "Answer: D"}},
    };
    std::map<std::string, std::string> vqa_answers;
    for (const auto& item : vqa_items) {
      vqa_answers["vlm-fixture|" + item.question] = replies.at(item.item_id)[0];
      vqa_answers["judge-fixture|" + item.question] = replies.at(item.item_id)[1];
    }

    auto model = std::make_shared<StandInModel>(manifest, vqa_answers);
    auto options = cfg.gateway_options();
    options.mode = GatewayMode::record;
    options.env_lookup = [](const std::string&) { return std::optional<std::string>("fixture-key"); };
    Gateway gateway(options, model);

    auto prompts = approve(generate_paraphrases(gateway, cfg.paraphrase_model_id, kDefaultBasePrompt));
    save_prompt_set(cfg.prompt_set_path(), prompts);
    model->set_paraphrases(prompts.paraphrases);

    const RunStore store(cfg.runs_dir);
    CollectOptions collect_opts;
    collect_opts.run_id = "demo";
    collect_opts.model_id = cfg.vlm_model_id;
    collect(gateway, store, manifest, prompts, collect_opts);
    const auto scored = score_run(gateway, store, "demo", {cfg.judge_model_id, cfg.embedding_provider_id, 4});
    std::cout << render_report(scored.scores, scored.ranking, ReportFormat::markdown);

    RatingStore ratings(cfg.ratings_file);
    int minute = 0;
    auto stamp = [&] { return fmt::format("2024-05-01T10:{:02}:00Z", minute++); };
    const std::array<std::array<int, 5>, 3> before = {{{4, 3, 3, 4, 3}, {3, 3, 2, 4, 3}, {4, 4, 3, 5, 4}}};
    for (const auto& m : store.read_outputs("demo")) {
      if (m.distribution_id != scored.ranking.preferred) continue;
      for (const auto& cell : m.outputs)
        ratings.submit(rating(output_explanation_id("demo", {m.part_id, m.distribution_id, cell.paraphrase_index}),
                              m.part_id, before[cell.paraphrase_index % 3], stamp()),
                       store);
    }

    const auto contexts = build_contexts(store, ratings, "demo", scored.ranking.preferred);
    std::vector<std::string> parts;
    std::map<std::string, IclPartContext> by_part;
    for (const auto& c : contexts.contexts) {
      parts.push_back(c.part_id);
      by_part[c.part_id] = c;
    }
    const auto plan = plan_batches(parts, BatchStrategy::full, parts.size(), parts.size());
    const auto improved = run_icl(gateway, plan, by_part, cfg.icl_model_id);
    write_icl_round(store, "demo", "r1", plan, improved, by_part, cfg.icl_model_id);
    for (const auto& [part, desc] : improved)
      ratings.submit(rating(icl_explanation_id("demo", "r1", part), part, {5, 4, 4, 5, 4}, stamp()), store);

    for (const char* m : {"vlm-fixture", "judge-fixture"}) {
      const auto s = score(ask_all(gateway, vqa_items, m, 4));
      std::cout << fmt::format("vqa {}: {}/{}\n", m, s.correct, s.total);
    }

    fs::remove_all(cfg.runs_dir);
  } catch (const Error& e) {
    std::cerr << e.to_json().dump() << "\n";
    return 1;
  }
  return 0;
}
