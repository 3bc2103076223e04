#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "vlmh/error.hpp"
#include "vlmh/experiment.hpp"

namespace fs = std::filesystem;
using namespace vlmh;
using vlmh::test::Workspace;

namespace {

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected a vlmh::Error");
  return ErrorKind::IoError;
}

fs::path cell_cache_path(Workspace& ws, const std::string& part, const std::string& dist, std::size_t index) {
  const Manifest manifest = ws.manifest();
  ChatRequest r;
  r.model_id = ws.config.vlm_model_id;
  r.user_text = ws.prompts().paraphrases.at(index);
  r.images = images_for(manifest, manifest.part(part), dist);
  r.temperature = ws.config.temperature;
  r.max_output_tokens = ws.config.max_output_tokens;
  return ws.gateway->cache_path(cache_key(canonical_request(r)));
}

ConsistencyScores flat_scores(const std::string& id, double value) {
  ConsistencyScores s;
  s.distribution_id = id;
  for (MetricId m : kAllMetrics) s.per_metric[m] = {value, 0.0};
  s.average = value;
  s.part_count = 1;
  return s;
}

}  // namespace

TEST_CASE("collect fills every cell from the recorded cache") {
  Workspace ws;
  const auto matrices = collect(*ws.gateway, ws.store(), ws.manifest(), ws.prompts(), ws.collect_options("t1"));
  CHECK(ws.transport->calls() == 0);
  REQUIRE(matrices.size() == 8);
  std::size_t cells = 0;
  for (const auto& m : matrices) {
    CHECK(m.complete(3));
    cells += m.outputs.size();
  }
  CHECK(cells == 24);

  const RunStore store = ws.store();
  const RunRecord record = store.read_record("t1");
  CHECK(record.paraphrase_count == 3);
  CHECK(record.distribution_ids == std::vector<std::string>{"A", "B", "C", "D"});
  CHECK(record.seed == 7);
  CHECK(record.mode == GatewayMode::replay);
  CHECK(store.read_inputs("t1").size() == 8);
  CHECK(store.read_holes("t1").empty());
  CHECK(store.read_outputs("t1") == matrices);

  SUBCASE("re-collect appends nothing") {
    const auto before = vlmh::read_file(store.run_dir("t1") / "outputs.jsonl");
    collect(*ws.gateway, store, ws.manifest(), ws.prompts(), ws.collect_options("t1"));
    CHECK(vlmh::read_file(store.run_dir("t1") / "outputs.jsonl") == before);
  }
  SUBCASE("changed inputs under the same id are refused") {
    auto opts = ws.collect_options("t1");
    opts.distribution_ids = {"A", "D"};
    CHECK(kind_of([&] { collect(*ws.gateway, store, ws.manifest(), ws.prompts(), opts); }) ==
          ErrorKind::PreconditionViolation);
    opts = ws.collect_options("t1");
    opts.seed = 99;
    CHECK(kind_of([&] { collect(*ws.gateway, store, ws.manifest(), ws.prompts(), opts); }) ==
          ErrorKind::PreconditionViolation);
  }
}

TEST_CASE("collect preconditions") {
  Workspace ws;
  PromptSet unapproved = ws.prompts();
  unapproved.approved = false;
  CHECK(kind_of([&] {
          collect(*ws.gateway, ws.store(), ws.manifest(), unapproved, ws.collect_options("t"));
        }) == ErrorKind::UnapprovedPrompts);
  CHECK_FALSE(ws.store().exists("t"));

  auto dup = ws.collect_options("t");
  dup.distribution_ids = {"A", "A"};
  CHECK(kind_of([&] { collect(*ws.gateway, ws.store(), ws.manifest(), ws.prompts(), dup); }) ==
        ErrorKind::DuplicateDistribution);

  for (const std::string bad : {"", "a/b", "..", ".", "x\\y"})
    CHECK(kind_of([&] { collect(*ws.gateway, ws.store(), ws.manifest(), ws.prompts(), ws.collect_options(bad)); }) ==
          ErrorKind::PreconditionViolation);
  CHECK(kind_of([&] { ws.store().require("nope"); }) == ErrorKind::UnknownRun);
}

TEST_CASE("missing cells become holes and a later collect repairs them") {
  Workspace ws;
  const fs::path entry = cell_cache_path(ws, "flange-02", "B", 1);
  REQUIRE(fs::exists(entry));
  const fs::path stash = ws.dir.path() / "stash.json";
  fs::rename(entry, stash);

  const RunStore store = ws.store();
  try {
    collect(*ws.gateway, store, ws.manifest(), ws.prompts(), ws.collect_options("h"));
    FAIL("expected PartialRun");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::PartialRun);
    CHECK(e.details()["run_id"] == "h");
    REQUIRE(e.details()["holes"].size() == 1);
    const auto& hole = e.details()["holes"][0];
    CHECK(hole["part_id"] == "flange-02");
    CHECK(hole["distribution_id"] == "B");
    CHECK(hole["paraphrase_index"] == 1);
    CHECK(hole["error"].get<std::string>().find("ReplayMiss") != std::string::npos);
  }
  CHECK(ws.transport->calls() == 0);
  CHECK(store.read_holes("h") == std::vector<CellRef>{{"flange-02", "B", 1}});

  std::size_t rows = 0;
  for (const auto& m : store.read_outputs("h")) rows += m.outputs.size();
  CHECK(rows == 23);
  CHECK(kind_of([&] { score_run(*ws.gateway, store, "h", ws.score_options()); }) == ErrorKind::PartialRun);

  fs::rename(stash, entry);
  collect(*ws.gateway, store, ws.manifest(), ws.prompts(), ws.collect_options("h"));
  CHECK(store.read_holes("h").empty());
  rows = 0;
  for (const auto& m : store.read_outputs("h")) rows += m.outputs.size();
  CHECK(rows == 24);
  CHECK_NOTHROW(score_run(*ws.gateway, store, "h", ws.score_options()));
}

TEST_CASE("score_run notices a group that never reached outputs.jsonl") {
  Workspace ws;
  const RunStore store = ws.store();
  collect(*ws.gateway, store, ws.manifest(), ws.prompts(), ws.collect_options("g"));
  // Drop every row of one (part, distribution) group.
  const fs::path outputs = store.run_dir("g") / "outputs.jsonl";
  std::ifstream in(outputs);
  std::string kept, line;
  while (std::getline(in, line)) {
    const auto row = nlohmann::json::parse(line);
    if (row["part_id"] == "bracket-01" && row["distribution_id"] == "C") continue;
    kept += line + "\n";
  }
  in.close();
  vlmh::write_file_atomic(outputs, kept);
  try {
    score_run(*ws.gateway, store, "g", ws.score_options());
    FAIL("expected PartialRun");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::PartialRun);
    CHECK(e.details()["holes"].size() == 3);
  }
}

TEST_CASE("fixture scoring prefers the mixed distribution") {
  Workspace ws;
  const RunStore store = ws.store();
  collect(*ws.gateway, store, ws.manifest(), ws.prompts(), ws.collect_options("s"));
  const ParsedReport scored = score_run(*ws.gateway, store, "s", ws.score_options());
  CHECK(ws.transport->calls() == 0);
  REQUIRE(scored.scores.size() == 4);
  CHECK(scored.ranking.preferred == "D");
  for (const auto& s : scored.scores) {
    CHECK(s.part_count == 2);
    for (MetricId m : kAllMetrics) {
      CHECK(s.per_metric.at(m).mean >= 0.0);
      CHECK(s.per_metric.at(m).mean <= 1.0);
    }
  }

  const ParsedReport loaded = load_scores(store, "s");
  CHECK(loaded.ranking == scored.ranking);
  CHECK(loaded.scores == scored.scores);
  const auto doc = nlohmann::json::parse(store.read_artifact("s", "scores.json"));
  CHECK(doc["run_id"] == "s");
  CHECK(doc["judge_model_id"] == ws.config.judge_model_id);
  CHECK(doc["per_part"].is_object());
  collect(*ws.gateway, store, ws.manifest(), ws.prompts(), ws.collect_options("unscored"));
  CHECK(kind_of([&] { load_scores(store, "unscored"); }) == ErrorKind::PreconditionViolation);
  CHECK(kind_of([&] { load_scores(store, "never-collected"); }) == ErrorKind::UnknownRun);
}

TEST_CASE("identical outputs score 1.0 on every metric") {
  const std::string judge_marker = "You are tasked with evaluating";
  Workspace ws(
      [&](const HttpRequest& req, std::size_t) {
        if (req.path == "/v1/embeddings") return test::embedding_reply(std::vector<double>(16, 0.25));
        if (req.body.find(judge_marker) != std::string::npos) return test::chat_reply("[Score]: 1.0");
        return test::chat_reply("A flat steel bracket with two counterbored mounting holes.");
      },
      GatewayMode::record);
  fs::remove_all(ws.config.cache_dir);
  const RunStore store = ws.store();
  collect(*ws.gateway, store, ws.manifest(), ws.prompts(), ws.collect_options("p"));
  const ParsedReport scored = score_run(*ws.gateway, store, "p", ws.score_options());
  for (const auto& s : scored.scores) {
    for (MetricId m : kAllMetrics) {
      CHECK(s.per_metric.at(m).mean == 1.0);
      CHECK(s.per_metric.at(m).std == 0.0);
    }
    CHECK(s.average == 1.0);
  }
  // All four tie, so the smallest id wins.
  CHECK(scored.ranking.preferred == "A");
}

TEST_CASE("rank orders by average and breaks ties by id") {
  std::vector<ConsistencyScores> s = {flat_scores("B", 0.5), flat_scores("A", 0.5), flat_scores("C", 0.7)};
  const auto r = rank(s);
  CHECK(r.preferred == "C");
  REQUIRE(r.order.size() == 3);
  CHECK(r.order[1].first == "A");
  CHECK(r.order[2].first == "B");
  CHECK(ranking_from_json(to_json(r)) == r);

  s.push_back(flat_scores("A", 0.1));
  CHECK(kind_of([&] { rank(s); }) == ErrorKind::DuplicateDistribution);
  CHECK(kind_of([&] { rank(std::span<const ConsistencyScores>{}); }) == ErrorKind::EmptyInput);
}

TEST_CASE("reports in every format") {
  std::vector<ConsistencyScores> s = {flat_scores("A", 0.25), flat_scores("D", 0.75)};
  s[1].per_metric[MetricId::bleu] = {0.5, 0.125};
  const auto r = rank(s);

  const std::string md = render_report(s, r, ReportFormat::markdown);
  CHECK(md.find("D (preferred)") != std::string::npos);
  CHECK(md.find("0.5000±0.1250") != std::string::npos);
  CHECK(md.find("Average") != std::string::npos);
  CHECK(md.find("Preferred distribution: D") != std::string::npos);

  const std::string csv = render_report(s, r, ReportFormat::csv);
  CHECK(csv.find("BLEU") != std::string::npos);
  CHECK(csv.find("\r\n") != std::string::npos);

  const auto parsed = parse_json_report(nlohmann::json::parse(render_report(s, r, ReportFormat::json)));
  CHECK(parsed.scores == s);
  CHECK(parsed.ranking == r);

  CHECK(report_format_from_string("md") == ReportFormat::markdown);
  CHECK(extension(ReportFormat::csv) == "csv");
  CHECK(kind_of([] { report_format_from_string("pdf"); }) == ErrorKind::PreconditionViolation);
  CHECK(kind_of([] { parse_json_report(nlohmann::json::object()); }) == ErrorKind::ParseError);
}

TEST_CASE("judge prompt numbers the descriptions") {
  const std::vector<std::string> d = {"first text", "second text", "third text"};
  const std::string p = judge_prompt(d);
  CHECK(p.rfind("You are tasked with evaluating", 0) == 0);
  CHECK(p.find("1. first text\n2. second text\n3. third text\n") != std::string::npos);
  CHECK(p.find("[Score]:") != std::string::npos);
}
