#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include "support.hpp"
#include "vlmh/cli.hpp"
#include "vlmh/config.hpp"
#include "vlmh/error.hpp"

namespace fs = std::filesystem;
using namespace vlmh;
using vlmh::test::TempDir;
using vlmh::test::Workspace;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(Workspace& ws, std::vector<std::string> args) {
  args.insert(args.begin(), {"--config", (ws.root() / "harness.json").string()});
  std::ostringstream out, err;
  const int code = dispatch(args, out, err, ws.transport);
  return {code, out.str(), err.str()};
}

Outcome run_bare(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err, std::make_shared<test::FakeTransport>());
  return {code, out.str(), err.str()};
}

json minimal_config() {
  return {{"models", {{"vlm", {{"base_url", "https://vlm.example"}}}, {"judge", {{"base_url", "https://j.example"}}}}},
          {"vlm_model_id", "vlm"},
          {"judge_model_id", "judge"}};
}

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

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run_bare({}).code == kExitUsage);
  CHECK(run_bare({"bogus"}).code == kExitUsage);
  CHECK(run_bare({"run"}).code == kExitUsage);
  const auto missing = run_bare({"run", "collect"});
  CHECK(missing.code == kExitUsage);
  CHECK(missing.err.find("--run-id") != std::string::npos);
  CHECK(run_bare({"run", "report", "--run-id", "x", "--format", "pdf"}).code == kExitUsage);
  CHECK(run_bare({"icl", "plan", "--strategy", "random"}).code == kExitUsage);
  CHECK(run_bare({"--seed", "minus-one", "run", "collect", "--run-id", "x"}).code == kExitUsage);

  const auto help = run_bare({"--help"});
  CHECK(help.code == kExitOk);
  for (const char* sub : {"paraphrase", "run", "icl", "rate", "vqa", "metrics"})
    CHECK(help.out.find(sub) != std::string::npos);
}

TEST_CASE("a missing config is a domain error") {
  TempDir dir;
  const auto r = run_bare({"--config", (dir / "absent.json").string(), "--json", "run", "rank", "--run-id", "x"});
  CHECK(r.code == kExitDomainError);
  CHECK(json::parse(r.err)["error"] == "ConfigError");
}

TEST_CASE("collect, score, rank and report from the command line") {
  Workspace ws;
  auto r = run_cli(ws, {"run", "collect", "--run-id", "demo"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out == "Run demo: 24 cells across 8 part/distribution pairs\n");

  r = run_cli(ws, {"run", "score", "--run-id", "demo"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("| Metric | A | B | C | D (preferred) |") == 0);

  r = run_cli(ws, {"--json", "run", "score", "--run-id", "demo"});
  REQUIRE(r.code == kExitOk);
  CHECK(json::parse(r.out)["ranking"]["preferred"] == "D");

  r = run_cli(ws, {"run", "rank", "--run-id", "demo"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.rfind("1. D  ", 0) == 0);
  CHECK(r.out.find("Preferred distribution: D\n") != std::string::npos);

  for (const char* fmt : {"md", "csv", "json"}) {
    r = run_cli(ws, {"run", "report", "--run-id", "demo", "--format", fmt});
    CHECK(r.code == kExitOk);
    CHECK(vlmh::read_file(ws.store().run_dir("demo") / (std::string("report.") + fmt)) == r.out);
  }
  CHECK(ws.transport->calls() == 0);

  r = run_cli(ws, {"run", "rank", "--run-id", "ghost"});
  CHECK(r.code == kExitDomainError);
  CHECK(r.err.find("UnknownRun") != std::string::npos);
}

TEST_CASE("scoring a run with holes fails with the hole list") {
  Workspace ws;
  const Manifest manifest = ws.manifest();
  ChatRequest cell;
  cell.model_id = ws.config.vlm_model_id;
  cell.user_text = ws.prompts().paraphrases.at(2);
  cell.images = images_for(manifest, manifest.part("bracket-01"), "C");
  cell.max_output_tokens = ws.config.max_output_tokens;
  REQUIRE(fs::remove(ws.gateway->cache_path(cache_key(canonical_request(cell)))));

  auto r = run_cli(ws, {"--json", "run", "collect", "--run-id", "h"});
  CHECK(r.code == kExitDomainError);
  const auto err = json::parse(r.err);
  CHECK(err["error"] == "PartialRun");
  CHECK(err["details"]["holes"].size() == 1);

  r = run_cli(ws, {"--json", "run", "score", "--run-id", "h"});
  CHECK(r.code == kExitDomainError);
  CHECK(json::parse(r.err)["error"] == "PartialRun");
  CHECK(ws.transport->calls() == 0);
}

TEST_CASE("metrics eval") {
  Workspace ws;
  vlmh::write_file_atomic(ws.root() / "c.txt", "the cat sat on the mat");
  vlmh::write_file_atomic(ws.root() / "r.txt", "the cat sat on the mat");
  auto r = run_cli(ws, {"metrics", "eval", "--candidate", (ws.root() / "c.txt").string(), "--reference",
                        (ws.root() / "r.txt").string()});
  REQUIRE(r.code == kExitOk);
  const auto j = json::parse(r.out);
  for (const char* k : {"rouge1", "rouge2", "rougeL", "bleu"}) CHECK(j[k].get<double>() == 1.0);

  r = run_cli(ws, {"metrics", "eval", "--candidate", (ws.root() / "none.txt").string(), "--reference",
                   (ws.root() / "r.txt").string()});
  CHECK(r.code == kExitUsage);
}

TEST_CASE("vqa run and leaderboard") {
  Workspace ws;
  const auto dataset = (ws.root() / "vqa/dataset.jsonl").string();
  auto r = run_cli(ws, {"vqa", "run", "--dataset", dataset, "--model", "vlm-fixture"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("vlm-fixture: 3/5 correct (60.00%), 1 unparsed") == 0);
  const fs::path vlm_results = ws.config.runs_dir / "vqa" / "vlm-fixture.jsonl";
  CHECK(fs::exists(vlm_results));

  const fs::path judge_results = ws.root() / "judge.jsonl";
  r = run_cli(ws, {"vqa", "run", "--dataset", dataset, "--model", "judge-fixture", "--out", judge_results.string()});
  REQUIRE(r.code == kExitOk);

  r = run_cli(ws, {"vqa", "score", "--results", vlm_results.string(), "--results", judge_results.string()});
  REQUIRE(r.code == kExitOk);
  const auto judge_row = r.out.find("| judge-fixture | 80.00 | 4 | 5 | 0 |");
  const auto vlm_row = r.out.find("| vlm-fixture | 60.00 | 3 | 5 | 1 |");
  REQUIRE(judge_row != std::string::npos);
  REQUIRE(vlm_row != std::string::npos);
  CHECK(judge_row < vlm_row);
  CHECK(ws.transport->calls() == 0);

  r = run_cli(ws, {"vqa", "run", "--dataset", (ws.root() / "nope.jsonl").string(), "--model", "vlm-fixture"});
  CHECK(r.code == kExitDomainError);
}

TEST_CASE("icl round and rating summary") {
  Workspace ws;
  REQUIRE(run_cli(ws, {"run", "collect", "--run-id", "demo"}).code == kExitOk);

  // The preferred distribution comes from scores.json.
  auto r = run_cli(ws, {"icl", "run", "--run-id", "demo", "--out-round", "r1"});
  CHECK(r.code == kExitDomainError);
  CHECK(r.err.find("run score") != std::string::npos);

  REQUIRE(run_cli(ws, {"run", "score", "--run-id", "demo"}).code == kExitOk);
  r = run_cli(ws, {"--json", "icl", "run", "--run-id", "demo", "--out-round", "r1"});
  REQUIRE(r.code == kExitOk);
  const auto j = json::parse(r.out);
  CHECK(j["distribution_id"] == "D");
  CHECK(j["parts"] == 2);
  CHECK(ws.transport->calls() == 0);

  r = run_cli(ws, {"icl", "run", "--run-id", "demo", "--out-round", "r1"});
  CHECK(r.code == kExitDomainError);
  r = run_cli(ws, {"icl", "run", "--run-id", "demo", "--out-round", "r2", "--distribution", "A"});
  CHECK(r.code == kExitDomainError);
  CHECK(r.err.find("EmptyInput") != std::string::npos);

  r = run_cli(ws, {"rate", "summary", "--run-id", "demo"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("| Metric | Before ICL-HF (n=6) | After ICL-HF (n=2) |") == 0);
  CHECK(r.out.find("| Overall Quality | 3.33±0.47 | 4.00±0.00 |") != std::string::npos);

  r = run_cli(ws, {"rate", "summary", "--phase", "after_iclhf", "--format", "csv"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("After ICL-HF (n=2)") != std::string::npos);
  CHECK(r.out.find("Before") == std::string::npos);

  r = run_cli(ws, {"rate", "summary", "--run-id", "other"});
  CHECK(r.code == kExitDomainError);
}

TEST_CASE("icl plan") {
  Workspace ws;
  auto r = run_cli(ws, {"icl", "plan", "--parts", "a,b,c,d,e", "--strategy", "seq", "--size", "2"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out == "5 parts, strategy sequential, 3 batches\n  batch 0: a b\n  batch 1: c d\n  batch 2: e\n");

  r = run_cli(ws, {"--json", "icl", "plan", "--parts", "a,b,c,d", "--strategy", "window", "--size", "2",
                   "--stride", "1"});
  REQUIRE(r.code == kExitOk);
  CHECK(json::parse(r.out)["batches"].size() == 3);

  r = run_cli(ws, {"icl", "plan"});
  CHECK(r.out.rfind("2 parts, strategy full, 1 batches", 0) == 0);

  r = run_cli(ws, {"--json", "icl", "plan", "--parts", "a,b", "--strategy", "window", "--size", "1", "--stride",
                   "2"});
  CHECK(r.code == kExitDomainError);
  CHECK(json::parse(r.err)["error"] == "InvalidWindow");
}

TEST_CASE("paraphrase generation and approval") {
  Workspace ws;
  auto r = run_cli(ws, {"paraphrase", "gen"});
  CHECK(r.code == kExitDomainError);
  CHECK(r.err.find("--force") != std::string::npos);

  r = run_cli(ws, {"paraphrase", "gen", "--name", "fresh"});
  REQUIRE(r.code == kExitOk);
  const fs::path fresh = ws.config.prompts_dir / "fresh.json";
  PromptSet set = load_prompt_set(fresh);
  CHECK_FALSE(set.approved);
  CHECK(set.paraphrases == ws.prompts().paraphrases);
  CHECK(ws.transport->calls() == 0);

  r = run_cli(ws, {"paraphrase", "approve", "--name", "fresh", "--edit", "0=Describe this part in detail."});
  REQUIRE(r.code == kExitOk);
  set = load_prompt_set(fresh);
  CHECK(set.approved);
  CHECK(set.paraphrases[0] == "Describe this part in detail.");
  CHECK(set.provenance == Provenance::mixed);

  r = run_cli(ws, {"--json", "paraphrase", "approve", "--name", "fresh", "--edit", "7=x"});
  CHECK(r.code == kExitDomainError);
  CHECK(json::parse(r.err)["error"] == "IndexOutOfRange");
  CHECK(run_cli(ws, {"paraphrase", "approve", "--name", "fresh", "--edit", "first=x"}).code == kExitUsage);
  CHECK(run_cli(ws, {"paraphrase", "approve", "--name", "../escape"}).code == kExitDomainError);
}

TEST_CASE("config parsing") {
  const fs::path base = "/srv/harness";
  const HarnessConfig c = parse_config(minimal_config(), base);
  CHECK(c.paraphrase_model_id == "vlm");
  CHECK(c.icl_model_id == "vlm");
  CHECK(c.concurrency_limit == 4);
  CHECK(c.gateway_mode == GatewayMode::replay);
  CHECK(c.cache_dir == base / "cache");
  CHECK(c.prompt_set_path() == base / "prompts" / "default.json");
  CHECK(c.models.at("vlm").path == "/v1/chat/completions");
  CHECK_FALSE(c.static_dir);
  CHECK(c.gateway_options().embedders.empty());

  json with_embed = minimal_config();
  with_embed["embedding_provider"] = {{"provider_id", "e"}, {"base_url", "https://e.example"}, {"dimension", 8}};
  with_embed["retry"] = {{"max_attempts", 2}, {"initial_backoff_ms", 10}};
  with_embed["runs_dir"] = "../runs";
  const HarnessConfig e = parse_config(with_embed, base);
  CHECK(e.embedding_provider.endpoint.path == "/v1/embeddings");
  CHECK(e.gateway_options().embedders.count("e") == 1);
  CHECK(e.retry.max_attempts == 2);
  CHECK(e.retry.initial_backoff == std::chrono::milliseconds(10));
  CHECK(e.runs_dir == fs::path("/srv/runs"));

  auto broken = [&](auto mutate) {
    json doc = minimal_config();
    mutate(doc);
    return kind_of([&] { parse_config(doc, base); });
  };
  CHECK(broken([](json& d) { d.erase("models"); }) == ErrorKind::ConfigError);
  CHECK(broken([](json& d) { d["judge_model_id"] = "absent"; }) == ErrorKind::ConfigError);
  CHECK(broken([](json& d) { d["icl_model_id"] = "absent"; }) == ErrorKind::ConfigError);
  CHECK(broken([](json& d) { d["concurrency_limit"] = 0; }) == ErrorKind::ConfigError);
  CHECK(broken([](json& d) { d["gateway_mode"] = "offline"; }) == ErrorKind::ConfigError);
  CHECK(broken([](json& d) { d["models"]["vlm"].erase("base_url"); }) == ErrorKind::ConfigError);
  CHECK(broken([](json& d) { d["retry"] = {{"max_attempts", 0}}; }) == ErrorKind::ConfigError);
  CHECK(kind_of([] { parse_config(json::array(), "/"); }) == ErrorKind::ConfigError);
}

TEST_CASE("config file location") {
  TempDir dir;
  CHECK(kind_of([&] { load_config(dir / "missing.json"); }) == ErrorKind::ConfigError);
  vlmh::write_file_atomic(dir / "bad.json", "{");
  CHECK(kind_of([&] { load_config(dir / "bad.json"); }) == ErrorKind::ConfigError);

  vlmh::write_file_atomic(dir / "h.json", minimal_config().dump());
  CHECK(load_config(dir / "h.json").manifest == dir.path() / "manifest.json");

  CHECK(resolve_config_path(std::string("x.json")) == fs::path("x.json"));
  ::setenv("VLMHARNESS_CONFIG", "/etc/env.json", 1);
  CHECK(resolve_config_path(std::nullopt) == fs::path("/etc/env.json"));
  CHECK(resolve_config_path(std::string("flag.json")) == fs::path("flag.json"));
  ::unsetenv("VLMHARNESS_CONFIG");
  CHECK(resolve_config_path(std::nullopt) == fs::path("harness.json"));
}
