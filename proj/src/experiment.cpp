#include "vlmh/experiment.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <fmt/format.h>

#include "vlmh/error.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

namespace {

struct Cell {
  CellRef ref;
  const std::vector<ImageRef>* images;
};

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

std::string cell_text(const MeanStd& ms) { return fmt::format("{:.4f}±{:.4f}", ms.mean, ms.std); }

std::string column_title(const std::string& id, const DistributionRanking& ranking) {
  return id == ranking.preferred ? id + " (preferred)" : id;
}

}  // namespace

// Image bytes stand in for paths so a relocated workspace keeps its digest.
std::string manifest_digest(const Manifest& manifest) {
  json doc = to_json(manifest);
  for (auto& part : doc["parts"])
    for (auto& [id, images] : part["distributions"].items())
      for (auto& img : images) img["path"] = sha256_hex(read_file(img["path"].get<std::string>()));
  return sha256_hex(doc.dump());
}

std::string prompt_set_digest(const PromptSet& prompts) { return sha256_hex(to_json(prompts).dump()); }

std::vector<OutputMatrix> collect(Gateway& gateway, const RunStore& store, const Manifest& manifest,
                                  const PromptSet& prompts, const CollectOptions& options) {
  if (!prompts.approved)
    fail(ErrorKind::UnapprovedPrompts, "prompt set is not approved; run `paraphrase approve` first");
  if (prompts.paraphrases.empty()) fail(ErrorKind::PreconditionViolation, "prompt set has no paraphrases");
  if (options.model_id.empty()) fail(ErrorKind::ConfigError, "no VLM model id configured");

  const std::vector<std::string> dists =
      options.distribution_ids.empty() ? distribution_ids(manifest) : options.distribution_ids;
  if (std::set<std::string>(dists.begin(), dists.end()).size() != dists.size())
    fail(ErrorKind::DuplicateDistribution, "distribution list contains duplicates");

  std::vector<CellInputs> inputs;
  for (const auto& part : manifest.parts)
    for (const auto& d : dists) inputs.push_back({part.part_id, d, images_for(manifest, part, d, options.seed)});

  std::uint64_t seed = options.seed.value_or(0);
  if (!options.seed && !manifest.mixed_distributions.empty()) seed = manifest.mixed_distributions.front().seed;

  RunRecord record{options.run_id,   manifest_digest(manifest), prompt_set_digest(prompts), gateway.mode(),
                   utc_now_iso8601(), seed,                      options.model_id,            dists,
                   prompts.paraphrases.size()};
  if (store.exists(options.run_id)) {
    const RunRecord prior = store.read_record(options.run_id);
    if (prior.manifest_digest != record.manifest_digest || prior.prompt_set_digest != record.prompt_set_digest ||
        prior.distribution_ids != record.distribution_ids || prior.model_id != record.model_id ||
        prior.seed != record.seed)
      fail(ErrorKind::PreconditionViolation,
           "run " + options.run_id + " already exists with different inputs; choose a new run id");
  } else {
    store.write_record(record);
    store.write_inputs(options.run_id, inputs);
  }

  std::set<std::tuple<std::string, std::string, std::size_t>> done;
  for (const auto& m : store.read_outputs(options.run_id))
    for (const auto& o : m.outputs) done.emplace(m.part_id, m.distribution_id, o.paraphrase_index);

  std::vector<Cell> todo;
  for (const auto& in : inputs)
    for (std::size_t c = 0; c < prompts.paraphrases.size(); ++c)
      if (!done.count({in.part_id, in.distribution_id, c}))
        todo.push_back({{in.part_id, in.distribution_id, c}, &in.images});

  std::vector<std::optional<ChatResponse>> responses(todo.size());
  std::vector<std::string> failures(todo.size());
  for_each_bounded(todo.size(), options.concurrency, [&](std::size_t i) {
    ChatRequest request;
    request.model_id = options.model_id;
    request.user_text = prompts.paraphrases[todo[i].ref.paraphrase_index];
    request.images = *todo[i].images;
    request.temperature = options.temperature;
    request.max_output_tokens = options.max_output_tokens;
    try {
      responses[i] = gateway.chat(request);
    } catch (const Error& e) {
      failures[i] = fmt::format("{}: {}", kind_name(e.kind()), e.what());
    }
  });

  std::vector<CellRef> holes;
  json hole_details = json::array();
  for (std::size_t i = 0; i < todo.size(); ++i) {
    if (responses[i]) {
      store.append_output(options.run_id, todo[i].ref, *responses[i]);
    } else {
      holes.push_back(todo[i].ref);
      json h = to_json(todo[i].ref);
      h["error"] = failures[i];
      hole_details.push_back(std::move(h));
    }
  }
  store.write_holes(options.run_id, holes);

  if (!holes.empty()) {
    std::string listing;
    for (const auto& h : holes)
      listing += fmt::format("\n  part={} distribution={} paraphrase={}", h.part_id, h.distribution_id,
                             h.paraphrase_index);
    fail(ErrorKind::PartialRun,
         fmt::format("{} of {} cells failed in run {}:{}", holes.size(),
                     inputs.size() * prompts.paraphrases.size(), options.run_id, listing),
         {{"run_id", options.run_id}, {"holes", std::move(hole_details)}});
  }

  std::vector<OutputMatrix> matrices;
  const std::set<std::string> wanted(dists.begin(), dists.end());
  for (auto& m : store.read_outputs(options.run_id))
    if (wanted.count(m.distribution_id)) matrices.push_back(std::move(m));
  return matrices;
}

std::string judge_prompt(std::span<const std::string> descriptions) {
  std::string text =
      "You are tasked with evaluating the consistency of multiple descriptions of the same 3D mechanical part. "
      "These descriptions were generated by an AI model in response to slightly different prompts about the "
      "same image. Your job is to assess how consistent these descriptions are with each other in terms of "
      "content, details, and overall interpretation of the part.\n\n"
      "Please consider the following aspects:\n"
      "1. Name/Type Consistency: Do all descriptions refer to the part using the same or very similar "
      "names/types?\n"
      "2. Geometric Features Consistency: Are the descriptions of the part's shape, size, and key geometric "
      "features consistent across all versions?\n"
      "3. Functionality Consistency: Do all descriptions attribute the same or very similar functions or "
      "purposes to the part?\n"
      "4. Detail Level Consistency: Is the level of detail provided about the part similar across all "
      "descriptions?\n"
      "5. Context Consistency: If the part's position or role within a larger assembly is mentioned, is this "
      "consistent across descriptions?\n\n"
      "After analyzing the descriptions, please provide:\n"
      "1. A consistency score from 0 to 1, where 0 means completely inconsistent and 1 means perfectly "
      "consistent.\n"
      "2. A brief explanation (2-3 sentences) justifying your score.\n\n"
      "Descriptions to evaluate:\n";
  for (std::size_t i = 0; i < descriptions.size(); ++i) text += fmt::format("{}. {}\n", i + 1, descriptions[i]);
  text += "\nYour consistency score and explanation:\n[Score]: \n[Explanation]: \n";
  return text;
}

MetricMap score_part(Gateway& gateway, const OutputMatrix& matrix, const ScoreOptions& options) {
  const auto texts = matrix.texts();
  MetricMap m;
  for (MetricId id : {MetricId::rouge1, MetricId::rouge2, MetricId::rougeL, MetricId::bleu})
    m[id] = lexical_consistency(texts, id);

  std::vector<EmbeddingVector> embeddings;
  embeddings.reserve(texts.size());
  for (const auto& t : texts) embeddings.push_back(gateway.embed(t, options.embedding_provider));
  m[MetricId::cosine] = pairwise_mean(embeddings);

  ChatRequest judge;
  judge.model_id = options.judge_model_id;
  judge.user_text = judge_prompt(texts);
  judge.temperature = 0.0;
  judge.max_output_tokens = 512;
  m[MetricId::judge] = parse_judge(gateway.chat(judge).text).score;
  return m;
}

ConsistencyScores score_distribution(Gateway& gateway, std::span<const OutputMatrix> matrices,
                                     const ScoreOptions& options, std::vector<MetricMap>* per_part) {
  if (matrices.empty()) fail(ErrorKind::EmptyInput, "no output matrices to score");
  const std::string& dist = matrices.front().distribution_id;
  for (const auto& m : matrices) {
    if (m.distribution_id != dist)
      fail(ErrorKind::PreconditionViolation, "score_distribution mixes distributions " + dist + " and " +
                                                 m.distribution_id);
    if (m.outputs.size() < 2 || !m.complete(m.outputs.size()))
      fail(ErrorKind::PartialRun, fmt::format("matrix for part {} / {} is incomplete", m.part_id, dist),
           {{"part_id", m.part_id}, {"distribution_id", dist}});
  }
  std::vector<MetricMap> maps(matrices.size());
  for_each_bounded(matrices.size(), options.concurrency,
                   [&](std::size_t i) { maps[i] = score_part(gateway, matrices[i], options); });
  auto scores = aggregate(maps, dist);
  if (per_part) *per_part = std::move(maps);
  return scores;
}

json to_json(const DistributionRanking& r) {
  json order = json::array();
  for (const auto& [id, avg] : r.order) order.push_back({{"distribution_id", id}, {"average", avg}});
  return {{"order", std::move(order)}, {"preferred", r.preferred}};
}

DistributionRanking ranking_from_json(const json& j) {
  try {
    DistributionRanking r;
    for (const auto& e : j.at("order"))
      r.order.emplace_back(e.at("distribution_id").get<std::string>(), e.at("average").get<double>());
    r.preferred = j.at("preferred").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("malformed ranking: ") + e.what());
  }
}

DistributionRanking rank(std::span<const ConsistencyScores> scores) {
  if (scores.empty()) fail(ErrorKind::EmptyInput, "nothing to rank");
  DistributionRanking r;
  std::set<std::string> seen;
  for (const auto& s : scores) {
    if (!seen.insert(s.distribution_id).second)
      fail(ErrorKind::DuplicateDistribution, "distribution " + s.distribution_id + " appears twice",
           {{"distribution_id", s.distribution_id}});
    r.order.emplace_back(s.distribution_id, s.average);
  }
  std::sort(r.order.begin(), r.order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  r.preferred = r.order.front().first;
  return r;
}

ReportFormat report_format_from_string(const std::string& name) {
  if (name == "md" || name == "markdown") return ReportFormat::markdown;
  if (name == "csv") return ReportFormat::csv;
  if (name == "json") return ReportFormat::json;
  fail(ErrorKind::PreconditionViolation, "unknown report format: " + name);
}

std::string extension(ReportFormat format) {
  switch (format) {
    case ReportFormat::markdown: return "md";
    case ReportFormat::csv: return "csv";
    case ReportFormat::json: return "json";
  }
  return "md";
}

std::string render_report(std::span<const ConsistencyScores> scores, const DistributionRanking& ranking,
                          ReportFormat format) {
  if (format == ReportFormat::json) {
    json dists = json::array();
    for (const auto& s : scores) dists.push_back(to_json(s));
    return json{{"distributions", std::move(dists)}, {"ranking", to_json(ranking)}}.dump(2) + "\n";
  }

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"Metric"};
  for (const auto& s : scores) header.push_back(column_title(s.distribution_id, ranking));
  for (MetricId id : kAllMetrics) {
    std::vector<std::string> row{display_name(id)};
    for (const auto& s : scores) {
      auto it = s.per_metric.find(id);
      row.push_back(it == s.per_metric.end() ? "n/a" : cell_text(it->second));
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::string> avg{"Average"};
  for (const auto& s : scores) avg.push_back(cell_text({s.average, s.average_std}));
  rows.push_back(std::move(avg));

  std::string out;
  if (format == ReportFormat::csv) {
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + csv_field(cells[i]);
      out += "\r\n";
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }

  auto line = [&](const std::vector<std::string>& cells) {
    out += "|";
    for (const auto& c : cells) out += " " + c + " |";
    out += "\n";
  };
  line(header);
  out += "|---";
  for (std::size_t i = 0; i < scores.size(); ++i) out += "|---:";
  out += "|\n";
  for (const auto& r : rows) line(r);
  out += "\nPreferred distribution: " + ranking.preferred + "\n";
  return out;
}

ParsedReport parse_json_report(const json& j) {
  ParsedReport r;
  try {
    for (const auto& s : j.at("distributions")) r.scores.push_back(consistency_scores_from_json(s));
    r.ranking = ranking_from_json(j.at("ranking"));
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("malformed report: ") + e.what());
  }
  return r;
}

ParsedReport score_run(Gateway& gateway, const RunStore& store, const std::string& run_id,
                       const ScoreOptions& options) {
  const RunRecord record = store.read_record(run_id);
  std::vector<CellRef> missing = store.read_holes(run_id);
  const auto matrices = store.read_outputs(run_id);

  std::map<std::string, std::vector<OutputMatrix>> by_dist;
  for (const auto& m : matrices) {
    for (std::size_t c = 0; c < record.paraphrase_count; ++c) {
      const bool present = std::any_of(m.outputs.begin(), m.outputs.end(),
                                       [c](const OutputCell& o) { return o.paraphrase_index == c; });
      const CellRef cell{m.part_id, m.distribution_id, c};
      if (!present && std::find(missing.begin(), missing.end(), cell) == missing.end()) missing.push_back(cell);
    }
    by_dist[m.distribution_id].push_back(m);
  }
  for (const auto& in : store.read_inputs(run_id)) {
    const bool seen = std::any_of(matrices.begin(), matrices.end(), [&](const OutputMatrix& m) {
      return m.part_id == in.part_id && m.distribution_id == in.distribution_id;
    });
    for (std::size_t c = 0; !seen && c < record.paraphrase_count; ++c) {
      const CellRef cell{in.part_id, in.distribution_id, c};
      if (std::find(missing.begin(), missing.end(), cell) == missing.end()) missing.push_back(cell);
    }
  }
  if (!missing.empty()) {
    json list = json::array();
    for (const auto& h : missing) list.push_back(to_json(h));
    fail(ErrorKind::PartialRun,
         fmt::format("run {} has {} missing cells; re-run `run collect` before scoring", run_id, missing.size()),
         {{"run_id", run_id}, {"holes", std::move(list)}});
  }

  ParsedReport report;
  json per_part = json::object();
  for (const auto& dist : record.distribution_ids) {
    auto it = by_dist.find(dist);
    if (it == by_dist.end())
      fail(ErrorKind::PartialRun, "run " + run_id + " has no outputs for distribution " + dist);
    std::vector<MetricMap> maps;
    report.scores.push_back(score_distribution(gateway, it->second, options, &maps));
    json parts = json::object();
    for (std::size_t i = 0; i < maps.size(); ++i) {
      json values = json::object();
      for (const auto& [id, v] : maps[i]) values[to_string(id)] = v;
      parts[it->second[i].part_id] = std::move(values);
    }
    per_part[dist] = std::move(parts);
  }
  report.ranking = rank(report.scores);

  json doc = json::parse(render_report(report.scores, report.ranking, ReportFormat::json));
  doc["run_id"] = run_id;
  doc["judge_model_id"] = options.judge_model_id;
  doc["embedding_provider"] = options.embedding_provider;
  doc["per_part"] = std::move(per_part);
  store.write_artifact(run_id, "scores.json", doc.dump(2) + "\n");
  return report;
}

ParsedReport load_scores(const RunStore& store, const std::string& run_id) {
  store.require(run_id);
  const auto path = store.run_dir(run_id) / "scores.json";
  if (!fs::exists(path))
    fail(ErrorKind::PreconditionViolation, "run " + run_id + " has not been scored; run `run score` first");
  return parse_json_report(read_json_file(path));
}

}  // namespace vlmh
