#include "vlmh/cli.hpp"

#include <algorithm>
#include <csignal>
#include <cstdint>
#include <optional>

#include <CLI11.hpp>
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

namespace vlmh {

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool replay = false;
  bool json_output = false;
  bool verbose = false;
};

class Session {
 public:
  Session(const Globals& g, std::shared_ptr<Transport> transport, std::ostream& err)
      : g_(g), transport_(std::move(transport)), err_(err) {}

  const HarnessConfig& config() {
    if (!config_) {
      const auto path = resolve_config_path(g_.config.empty() ? std::nullopt : std::optional(g_.config));
      config_ = load_config(path);
      if (g_.replay) config_->gateway_mode = GatewayMode::replay;
      log(fmt::format("config {} (gateway mode {})", path.string(), to_string(config_->gateway_mode)));
    }
    return *config_;
  }

  Gateway& gateway() {
    if (!gateway_) {
      auto transport = transport_ ? transport_ : std::make_shared<HttpTransport>();
      gateway_ = std::make_unique<Gateway>(config().gateway_options(), std::move(transport));
    }
    return *gateway_;
  }

  RunStore runs() { return RunStore(config().runs_dir); }

  void log(const std::string& line) const {
    if (g_.verbose) err_ << line << "\n";
  }

 private:
  const Globals& g_;
  std::shared_ptr<Transport> transport_;
  std::ostream& err_;
  std::optional<HarnessConfig> config_;
  std::unique_ptr<Gateway> gateway_;
};

ParaphraseEdit parse_edit(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw CLI::ValidationError("--edit", "expected <index>=<text>, got '" + spec + "'");
  std::size_t index = 0;
  const std::string digits = spec.substr(0, eq);
  if (!std::all_of(digits.begin(), digits.end(), [](unsigned char c) { return std::isdigit(c); }))
    throw CLI::ValidationError("--edit", "index must be a non-negative integer: '" + digits + "'");
  index = std::stoul(digits);
  return {index, spec.substr(eq + 1)};
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto item = trim(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

fs::path prompt_set_file(const HarnessConfig& cfg, const std::string& name) {
  const std::string n = name.empty() ? cfg.prompt_set : name;
  if (n.empty() || n == "." || n == ".." || n.find_first_of("/\\") != std::string::npos)
    fail(ErrorKind::PreconditionViolation, "invalid prompt set name: \"" + n + "\"");
  return cfg.prompts_dir / (n + ".json");
}

std::string ranking_text(const DistributionRanking& r) {
  std::string out;
  for (std::size_t i = 0; i < r.order.size(); ++i)
    out += fmt::format("{}. {}  {:.4f}\n", i + 1, r.order[i].first, r.order[i].second);
  out += "Preferred distribution: " + r.preferred + "\n";
  return out;
}

RatingService* g_serving = nullptr;

extern "C" void stop_serving(int) {
  if (g_serving) g_serving->stop();
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
             std::shared_ptr<Transport> transport) {
  Globals g;
  CLI::App app{"Consistency harness for vision-language model explanations", "vlmharness"};
  app.add_option("--config", g.config, "Harness config (default: $VLMHARNESS_CONFIG or ./harness.json)");
  app.add_option("--seed", g.seed, "Seed for mixed-distribution sampling");
  app.add_flag("--replay", g.replay, "Force cache-only gateway mode");
  app.add_flag("--json", g.json_output, "Machine-readable output and errors");
  app.add_flag("--verbose", g.verbose, "Progress on stderr");
  app.require_subcommand(1);

  Session session(g, transport, err);
  std::function<void()> action;
  auto fallthrough = [](CLI::App* sub) {
    sub->fallthrough();
    sub->require_subcommand(1);
    return sub;
  };

  // paraphrase
  auto* paraphrase = fallthrough(app.add_subcommand("paraphrase", "Generate and approve prompt paraphrases"));
  std::string prompt_name;
  std::size_t paraphrase_count = kDefaultParaphraseCount;
  std::string base_prompt = kDefaultBasePrompt;
  bool overwrite = false;
  auto* pgen = paraphrase->add_subcommand("gen", "Generate paraphrases of the base prompt");
  pgen->add_option("--name", prompt_name, "Prompt set name (default: config prompt_set)");
  pgen->add_option("--count", paraphrase_count)->check(CLI::Range(1, 20));
  pgen->add_option("--base-prompt", base_prompt);
  pgen->add_flag("--force", overwrite, "Replace an existing prompt set");
  pgen->callback([&] {
    action = [&] {
      const auto& cfg = session.config();
      const auto path = prompt_set_file(cfg, prompt_name);
      if (fs::exists(path) && !overwrite)
        fail(ErrorKind::PreconditionViolation, path.string() + " exists; pass --force to replace it");
      const auto set = generate_paraphrases(session.gateway(), cfg.paraphrase_model_id, base_prompt,
                                            paraphrase_count, cfg.temperature);
      save_prompt_set(path, set);
      if (g.json_output) {
        out << json{{"path", path.string()}, {"prompt_set", to_json(set)}}.dump(2) << "\n";
      } else {
        for (std::size_t i = 0; i < set.paraphrases.size(); ++i) out << "[" << i << "] " << set.paraphrases[i] << "\n";
        out << "Saved " << path.string() << " (unapproved)\n";
      }
    };
  });
  std::vector<std::string> edit_specs;
  auto* papprove = paraphrase->add_subcommand("approve", "Apply edits and mark the prompt set approved");
  papprove->add_option("--name", prompt_name, "Prompt set name (default: config prompt_set)");
  papprove->add_option("--edit", edit_specs, "<index>=<text>, zero-based; repeatable");
  papprove->callback([&] {
    std::vector<ParaphraseEdit> edits;
    for (const auto& s : edit_specs) edits.push_back(parse_edit(s));
    action = [&, edits] {
      const auto& cfg = session.config();
      const auto path = prompt_set_file(cfg, prompt_name);
      const auto set = approve(load_prompt_set(path), edits);
      save_prompt_set(path, set);
      if (g.json_output)
        out << to_json(set).dump(2) << "\n";
      else
        out << "Approved " << path.string() << " (" << to_string(set.provenance) << ")\n";
    };
  });

  // run
  auto* run = fallthrough(app.add_subcommand("run", "Collect, score, rank and report a consistency run"));
  std::string run_id;
  std::string dists;
  std::string format_name = "md";
  std::string manifest_override;
  auto add_run_id = [&](CLI::App* sub) { sub->add_option("--run-id", run_id)->required(); };

  auto* rcollect = run->add_subcommand("collect", "Query the VLM for every missing cell");
  add_run_id(rcollect);
  rcollect->add_option("--distributions", dists, "Comma-separated ids (default: all)");
  rcollect->add_option("--manifest", manifest_override, "Manifest path (default: config manifest)");
  rcollect->callback([&] {
    action = [&] {
      const auto& cfg = session.config();
      const auto manifest = load_manifest(manifest_override.empty() ? cfg.manifest : fs::path(manifest_override));
      const auto prompts = load_prompt_set(cfg.prompt_set_path());
      CollectOptions opts;
      opts.run_id = run_id;
      opts.distribution_ids = split_csv(dists);
      opts.model_id = cfg.vlm_model_id;
      opts.temperature = cfg.temperature;
      opts.max_output_tokens = cfg.max_output_tokens;
      opts.seed = g.seed;
      opts.concurrency = cfg.concurrency_limit;
      const auto matrices = collect(session.gateway(), session.runs(), manifest, prompts, opts);
      std::size_t cells = 0;
      for (const auto& m : matrices) cells += m.outputs.size();
      if (g.json_output)
        out << json{{"run_id", run_id}, {"matrices", matrices.size()}, {"cells", cells}}.dump() << "\n";
      else
        out << fmt::format("Run {}: {} cells across {} part/distribution pairs\n", run_id, cells, matrices.size());
    };
  });

  auto* rscore = run->add_subcommand("score", "Compute the six consistency metrics");
  add_run_id(rscore);
  rscore->callback([&] {
    action = [&] {
      const auto& cfg = session.config();
      const auto parsed = score_run(session.gateway(), session.runs(), run_id,
                                    {cfg.judge_model_id, cfg.embedding_provider_id, cfg.concurrency_limit});
      if (g.json_output)
        out << json{{"run_id", run_id}, {"ranking", to_json(parsed.ranking)}}.dump() << "\n";
      else
        out << render_report(parsed.scores, parsed.ranking, ReportFormat::markdown);
    };
  });

  auto* rrank = run->add_subcommand("rank", "Order distributions by average consistency");
  add_run_id(rrank);
  rrank->callback([&] {
    action = [&] {
      const auto parsed = load_scores(session.runs(), run_id);
      const auto ranking = rank(parsed.scores);
      if (g.json_output)
        out << to_json(ranking).dump(2) << "\n";
      else
        out << ranking_text(ranking);
    };
  });

  auto* rreport = run->add_subcommand("report", "Render the score table and save it in the run");
  add_run_id(rreport);
  rreport->add_option("--format", format_name, "md, csv or json")
      ->check(CLI::IsMember({"md", "markdown", "csv", "json"}));
  rreport->callback([&] {
    action = [&] {
      const auto store = session.runs();
      const auto parsed = load_scores(store, run_id);
      const auto format = report_format_from_string(format_name);
      const auto text = render_report(parsed.scores, rank(parsed.scores), format);
      store.write_artifact(run_id, "report." + extension(format), text);
      out << text;
    };
  });

  // icl
  auto* icl = fallthrough(app.add_subcommand("icl", "In-context learning from human feedback"));
  std::string strategy_name = "full";
  std::size_t batch_size = 0;
  std::size_t stride = 0;
  std::string out_round;
  std::string distribution;
  std::string rater;
  auto add_plan_flags = [&](CLI::App* sub) {
    sub->add_option("--strategy", strategy_name, "full, window or seq")
        ->check(CLI::IsMember({"full", "window", "sliding_window", "seq", "sequential"}));
    sub->add_option("--size", batch_size, "Parts per batch (default: all)");
    sub->add_option("--stride", stride, "Window step (default: --size)");
  };
  auto make_plan = [&](const std::vector<std::string>& parts) {
    const std::size_t size = batch_size ? batch_size : std::max<std::size_t>(parts.size(), 1);
    return plan_batches(parts, batch_strategy_from_string(strategy_name), size, stride ? stride : size);
  };

  auto* iplan = icl->add_subcommand("plan", "Show how parts would be batched");
  add_plan_flags(iplan);
  iplan->add_option("--run-id", run_id, "Plan over this run's parts (default: manifest parts)");
  iplan->add_option("--parts", dists, "Comma-separated part ids to plan over instead");
  iplan->callback([&] {
    action = [&] {
      std::vector<std::string> parts;
      if (!dists.empty()) {
        parts = split_csv(dists);
      } else if (!run_id.empty()) {
        const auto store = session.runs();
        store.require(run_id);
        for (const auto& in : store.read_inputs(run_id))
          if (std::find(parts.begin(), parts.end(), in.part_id) == parts.end()) parts.push_back(in.part_id);
      } else {
        for (const auto& p : load_manifest(session.config().manifest).parts) parts.push_back(p.part_id);
      }
      const auto plan = make_plan(parts);
      if (g.json_output) {
        out << to_json(plan).dump(2) << "\n";
      } else {
        out << fmt::format("{} parts, strategy {}, {} batches\n", parts.size(), to_string(plan.strategy),
                           plan.batches.size());
        for (const auto& b : plan.batches) {
          std::string ids;
          for (const auto& p : b.part_ids) ids += (ids.empty() ? "" : " ") + p;
          out << fmt::format("  batch {}: {}\n", b.batch_index, ids);
        }
      }
    };
  });

  auto* irun = icl->add_subcommand("run", "Generate improved descriptions from rated outputs");
  add_plan_flags(irun);
  irun->add_option("--run-id", run_id, "Prior run with rated outputs")->required();
  irun->add_option("--out-round", out_round, "Name of the new description round")->required();
  irun->add_option("--distribution", distribution, "Image source (default: preferred distribution)");
  irun->add_option("--rater", rater, "Use this rater's scores when several exist");
  irun->callback([&] {
    action = [&] {
      const auto& cfg = session.config();
      const auto store = session.runs();
      store.require(run_id);
      std::string dist = distribution;
      if (dist.empty()) dist = load_scores(store, run_id).ranking.preferred;
      RatingStore ratings(cfg.ratings_file);
      const auto set = build_contexts(store, ratings, run_id, dist, kIclImagesPerPart,
                                      rater.empty() ? std::nullopt : std::optional(rater));
      if (set.contexts.empty())
        fail(ErrorKind::EmptyInput, "no rated descriptions for distribution " + dist + " in run " + run_id);
      std::vector<std::string> parts;
      std::map<std::string, IclPartContext> by_part;
      for (const auto& c : set.contexts) {
        parts.push_back(c.part_id);
        by_part[c.part_id] = c;
      }
      const auto plan = make_plan(parts);
      session.log(fmt::format("icl: {} parts in {} batches, {} skipped", parts.size(), plan.batches.size(),
                              set.skipped.size()));
      const auto results = run_icl(session.gateway(), plan, by_part, cfg.icl_model_id);
      write_icl_round(store, run_id, out_round, plan, results, by_part, cfg.icl_model_id);
      if (g.json_output)
        out << json{{"run_id", run_id}, {"round", out_round}, {"distribution_id", dist},
                    {"parts", results.size()}, {"skipped", set.skipped}}
                   .dump()
            << "\n";
      else
        out << fmt::format("Wrote {} improved descriptions to round {} of run {}\n", results.size(), out_round,
                           run_id);
    };
  });

  // rate
  auto* rate = fallthrough(app.add_subcommand("rate", "Human rating service and summaries"));
  int port = 8080;
  std::string host = "127.0.0.1";
  std::string static_dir;
  std::string phase_name;
  auto* rserve = rate->add_subcommand("serve", "Serve the rating API and UI");
  rserve->add_option("--port", port)->check(CLI::Range(0, 65535));
  rserve->add_option("--host", host);
  rserve->add_option("--static", static_dir, "UI directory served from / (default: config static_dir)");
  rserve->callback([&] {
    action = [&] {
      const auto& cfg = session.config();
      RatingStore ratings(cfg.ratings_file);
      std::optional<fs::path> ui = cfg.static_dir;
      if (!static_dir.empty()) ui = fs::path(static_dir);
      RatingService service(session.runs(), ratings, ui);
      g_serving = &service;
      std::signal(SIGINT, stop_serving);
      std::signal(SIGTERM, stop_serving);
      err << fmt::format("Serving ratings on http://{}:{}\n", host, port);
      const bool ok = service.listen(host, port);
      g_serving = nullptr;
      if (!ok) fail(ErrorKind::IoError, fmt::format("cannot listen on {}:{}", host, port));
    };
  });

  auto* rsummary = rate->add_subcommand("summary", "Mean and std of each criterion");
  rsummary->add_option("--run-id", run_id, "Restrict to one run (default: all ratings)");
  rsummary->add_option("--phase", phase_name, "before_iclhf or after_iclhf (default: both)")
      ->check(CLI::IsMember({"before_iclhf", "after_iclhf"}));
  rsummary->add_option("--format", format_name, "md, csv or json")
      ->check(CLI::IsMember({"md", "markdown", "csv", "json"}));
  rsummary->callback([&] {
    action = [&] {
      RatingStore ratings(session.config().ratings_file);
      const auto records = run_id.empty() ? ratings.all() : ratings.for_run(run_id);
      std::vector<RatingSummary> summaries;
      for (const Phase phase : {Phase::before_iclhf, Phase::after_iclhf}) {
        if (!phase_name.empty() && phase_from_string(phase_name) != phase) continue;
        std::vector<RatingRecord> subset;
        for (const auto& r : records)
          if (phase_of(r.explanation_id) == phase) subset.push_back(r);
        if (!subset.empty()) summaries.push_back(summarize(subset, phase));
      }
      if (summaries.empty()) fail(ErrorKind::EmptyInput, "no ratings match the selection");
      const auto format = g.json_output ? ReportFormat::json : report_format_from_string(format_name);
      out << render_rating_table(summaries, format);
    };
  });

  // vqa
  auto* vqa = fallthrough(app.add_subcommand("vqa", "Multiple-choice visual question answering"));
  std::string dataset;
  std::string model;
  std::string results_out;
  std::vector<std::string> result_files;
  auto* vrun = vqa->add_subcommand("run", "Ask every dataset item");
  vrun->add_option("--dataset", dataset)->required();
  vrun->add_option("--model", model)->required();
  vrun->add_option("--out", results_out, "Results JSONL (default: <runs_dir>/vqa/<model>.jsonl)");
  vrun->callback([&] {
    action = [&] {
      const auto& cfg = session.config();
      const auto items = load_vqa(dataset);
      if (items.empty()) fail(ErrorKind::EmptyInput, dataset + " has no items");
      const auto results = ask_all(session.gateway(), items, model, cfg.concurrency_limit);
      fs::path path = results_out;
      if (path.empty()) {
        std::string safe = model;
        std::replace_if(safe.begin(), safe.end(), [](char c) { return c == '/' || c == '\\'; }, '_');
        path = cfg.runs_dir / "vqa" / (safe + ".jsonl");
      }
      save_vqa_results(path, results);
      const auto s = score(results);
      if (g.json_output)
        out << json{{"results", path.string()}, {"model_id", model}, {"correct", s.correct},
                    {"total", s.total}, {"unparsed", s.unparsed}, {"accuracy_percent", s.accuracy_percent()}}
                   .dump()
            << "\n";
      else
        out << fmt::format("{}: {}/{} correct ({}%), {} unparsed; results in {}\n", model, s.correct, s.total,
                           s.accuracy_text(), s.unparsed, path.string());
    };
  });
  auto* vscore = vqa->add_subcommand("score", "Leaderboard over one or more result files");
  vscore->add_option("--results", result_files, "Results JSONL; repeatable")->required();
  vscore->add_option("--format", format_name, "md, csv or json")
      ->check(CLI::IsMember({"md", "markdown", "csv", "json"}));
  vscore->callback([&] {
    action = [&] {
      std::vector<LeaderboardRow> rows;
      for (const auto& file : result_files) {
        const auto results = load_vqa_results(file);
        if (results.empty()) fail(ErrorKind::EmptyInput, file + " has no results");
        std::map<std::string, std::vector<VqaResult>> by_model;
        for (const auto& r : results) by_model[r.model_id].push_back(r);
        for (const auto& [m, rs] : by_model) rows.push_back({m, score(rs)});
      }
      const auto format = g.json_output ? ReportFormat::json : report_format_from_string(format_name);
      out << render_leaderboard(rows, format);
    };
  });

  // metrics
  auto* metrics = fallthrough(app.add_subcommand("metrics", "Lexical metric utilities"));
  std::string candidate_file;
  std::string reference_file;
  auto* meval = metrics->add_subcommand("eval", "Print ROUGE-1/2/L and BLEU of a candidate against a reference");
  meval->add_option("--candidate", candidate_file)->required()->check(CLI::ExistingFile);
  meval->add_option("--reference", reference_file)->required()->check(CLI::ExistingFile);
  meval->callback([&] {
    action = [&] {
      const auto c = tokenize(read_file(candidate_file));
      const auto r = tokenize(read_file(reference_file));
      out << json{{"rouge1", rouge_n(c, r, 1)}, {"rouge2", rouge_n(c, r, 2)}, {"rougeL", rouge_l(c, r)},
                  {"bleu", bleu(c, r)}}
                 .dump(2)
          << "\n";
    };
  });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* deepest = &app;
    for (auto* sub = &app; sub;) {
      auto subs = sub->get_subcommands();
      if (subs.empty()) break;
      deepest = sub = subs.front();
    }
    err << deepest->help();
    return kExitUsage;
  }

  if (!action) {
    err << app.help();
    return kExitUsage;
  }
  try {
    action();
    return kExitOk;
  } catch (const Error& e) {
    if (g.json_output)
      err << e.to_json().dump() << "\n";
    else
      err << "error: " << kind_name(e.kind()) << ": " << e.what() << "\n";
    return kExitDomainError;
  } catch (const std::exception& e) {
    // Anything that escaped the domain layer is still a failed run, not a usage mistake.
    const Error wrapped(ErrorKind::IoError, e.what());
    if (g.json_output)
      err << wrapped.to_json().dump() << "\n";
    else
      err << "error: " << e.what() << "\n";
    return kExitDomainError;
  }
}

}  // namespace vlmh
