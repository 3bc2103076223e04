#include "vlmh/ratings.hpp"

#include <algorithm>
#include <set>

#include <fmt/format.h>

#include "vlmh/error.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t pos; (pos = s.find(sep, start)) != std::string::npos; start = pos + 1)
    parts.push_back(s.substr(start, pos - start));
  parts.push_back(s.substr(start));
  return parts;
}

std::vector<std::string> icl_rounds(const RunStore& store, const std::string& run_id) {
  std::vector<std::string> rounds;
  const auto dir = store.run_dir(run_id) / "icl";
  if (!fs::exists(dir)) return rounds;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "descriptions.jsonl")) rounds.push_back(e.path().filename().string());
  std::sort(rounds.begin(), rounds.end());
  return rounds;
}

}  // namespace

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::relevance: return "relevance";
    case Criterion::accuracy: return "accuracy";
    case Criterion::detail: return "detail";
    case Criterion::fluency: return "fluency";
    case Criterion::overall: return "overall";
  }
  return "overall";
}

std::string display_name(Criterion c) {
  switch (c) {
    case Criterion::relevance: return "Relevance";
    case Criterion::accuracy: return "Accuracy";
    case Criterion::detail: return "Detail";
    case Criterion::fluency: return "Fluency";
    case Criterion::overall: return "Overall Quality";
  }
  return "";
}

std::string to_string(Phase p) { return p == Phase::before_iclhf ? "before_iclhf" : "after_iclhf"; }

Phase phase_from_string(const std::string& name) {
  if (name == "before_iclhf" || name == "before") return Phase::before_iclhf;
  if (name == "after_iclhf" || name == "after") return Phase::after_iclhf;
  fail(ErrorKind::PreconditionViolation, "unknown phase: " + name);
}

int RatingRecord::score(Criterion c) const {
  switch (c) {
    case Criterion::relevance: return relevance;
    case Criterion::accuracy: return accuracy;
    case Criterion::detail: return detail;
    case Criterion::fluency: return fluency;
    case Criterion::overall: return overall;
  }
  return 0;
}

json to_json(const RatingRecord& r) {
  json j = {{"rating_id", r.rating_id},   {"part_id", r.part_id},     {"explanation_id", r.explanation_id},
            {"rater_id", r.rater_id},     {"relevance", r.relevance}, {"accuracy", r.accuracy},
            {"detail", r.detail},         {"fluency", r.fluency},     {"overall", r.overall},
            {"created_at", r.created_at}};
  j["comment"] = r.comment ? json(*r.comment) : json(nullptr);
  return j;
}

RatingRecord rating_record_from_json(const json& j) {
  if (!j.is_object()) fail(ErrorKind::ParseError, "rating must be a JSON object");
  auto str = [&](const char* key, bool required) -> std::string {
    if (!j.contains(key) || j.at(key).is_null()) {
      if (required) fail(ErrorKind::ParseError, fmt::format("rating is missing \"{}\"", key));
      return {};
    }
    if (!j.at(key).is_string()) fail(ErrorKind::ParseError, fmt::format("rating field \"{}\" must be a string", key));
    return j.at(key).get<std::string>();
  };
  auto score = [&](const char* key) {
    if (!j.contains(key)) fail(ErrorKind::ParseError, fmt::format("rating is missing \"{}\"", key));
    if (!j.at(key).is_number_integer())
      fail(ErrorKind::ScoreOutOfRange, fmt::format("{} must be an integer in [1,5]", key), {{"criterion", key}});
    return j.at(key).get<int>();
  };
  RatingRecord r;
  r.rating_id = str("rating_id", false);
  r.part_id = str("part_id", false);
  r.explanation_id = str("explanation_id", true);
  r.rater_id = str("rater_id", true);
  r.relevance = score("relevance");
  r.accuracy = score("accuracy");
  r.detail = score("detail");
  r.fluency = score("fluency");
  r.overall = score("overall");
  if (j.contains("comment") && !j.at("comment").is_null()) r.comment = str("comment", false);
  r.created_at = str("created_at", false);
  return r;
}

json to_json(const RatingSummary& s) {
  json per = json::object();
  for (const auto& [c, ms] : s.per_criterion) per[to_string(c)] = {{"mean", ms.mean}, {"std", ms.std}};
  return {{"phase", to_string(s.phase)}, {"sample_count", s.sample_count}, {"per_criterion", std::move(per)}};
}

RatingSummary summarize(std::span<const RatingRecord> records, Phase phase) {
  if (records.empty()) fail(ErrorKind::EmptyInput, "no ratings to summarize for phase " + to_string(phase));
  RatingSummary s;
  s.phase = phase;
  s.sample_count = records.size();
  std::vector<double> column(records.size());
  for (Criterion c : kAllCriteria) {
    for (std::size_t i = 0; i < records.size(); ++i) column[i] = records[i].score(c);
    s.per_criterion[c] = mean_std(column);
  }
  return s;
}

std::string render_rating_table(std::span<const RatingSummary> summaries, ReportFormat format) {
  if (format == ReportFormat::json) {
    json arr = json::array();
    for (const auto& s : summaries) arr.push_back(to_json(s));
    return json{{"summaries", std::move(arr)}}.dump(2) + "\n";
  }
  auto title = [](Phase p) { return p == Phase::before_iclhf ? std::string("Before ICL-HF") : std::string("After ICL-HF"); };
  std::vector<std::string> header{"Metric"};
  for (const auto& s : summaries) header.push_back(fmt::format("{} (n={})", title(s.phase), s.sample_count));
  std::vector<std::vector<std::string>> rows;
  for (Criterion c : kAllCriteria) {
    std::vector<std::string> row{display_name(c)};
    for (const auto& s : summaries) {
      const auto& ms = s.per_criterion.at(c);
      row.push_back(fmt::format("{:.2f}±{:.2f}", ms.mean, ms.std));
    }
    rows.push_back(std::move(row));
  }
  std::string out;
  if (format == ReportFormat::csv) {
    auto csv_line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
      out += "\r\n";
    };
    csv_line(header);
    for (const auto& r : rows) csv_line(r);
    return out;
  }
  auto line = [&](const std::vector<std::string>& cells) {
    out += "|";
    for (const auto& c : cells) out += " " + c + " |";
    out += "\n";
  };
  line(header);
  out += "|---";
  for (std::size_t i = 0; i < summaries.size(); ++i) out += "|---:";
  out += "|\n";
  for (const auto& r : rows) line(r);
  return out;
}

std::string output_explanation_id(const std::string& run_id, const CellRef& cell) {
  return fmt::format("{}/{}/{}/{}", run_id, cell.part_id, cell.distribution_id, cell.paraphrase_index);
}

std::string icl_explanation_id(const std::string& run_id, const std::string& round, const std::string& part_id) {
  return fmt::format("{}/icl/{}/{}", run_id, round, part_id);
}

std::string run_of(const std::string& explanation_id) { return split(explanation_id, '/').front(); }

Phase phase_of(const std::string& explanation_id) {
  const auto parts = split(explanation_id, '/');
  return parts.size() == 4 && parts[1] == "icl" ? Phase::after_iclhf : Phase::before_iclhf;
}

std::vector<Explanation> list_explanations(const RunStore& store, const std::string& run_id) {
  store.require(run_id);
  std::map<std::pair<std::string, std::string>, std::vector<ImageRef>> images;
  for (auto& c : store.read_inputs(run_id)) images[{c.part_id, c.distribution_id}] = std::move(c.images);

  std::vector<Explanation> out;
  for (const auto& m : store.read_outputs(run_id)) {
    for (const auto& o : m.outputs) {
      out.push_back({output_explanation_id(run_id, {m.part_id, m.distribution_id, o.paraphrase_index}), m.part_id,
                     o.text, images[{m.part_id, m.distribution_id}], Phase::before_iclhf});
    }
  }
  for (const auto& round : icl_rounds(store, run_id)) {
    for (const auto& row : read_jsonl(store.run_dir(run_id) / "icl" / round / "descriptions.jsonl")) {
      Explanation e;
      e.part_id = row.at("part_id").get<std::string>();
      e.explanation_id = icl_explanation_id(run_id, round, e.part_id);
      e.text = row.at("text").get<std::string>();
      for (const auto& img : row.value("images", json::array()))
        e.images.push_back({img.at("path").get<std::string>(), media_type_from_string(img.at("media_type").get<std::string>())});
      e.phase = Phase::after_iclhf;
      out.push_back(std::move(e));
    }
  }
  return out;
}

std::vector<ImageRef> part_images(const RunStore& store, const std::string& run_id, const std::string& part_id) {
  std::vector<ImageRef> out;
  std::set<fs::path> seen;
  for (const auto& e : list_explanations(store, run_id)) {
    if (e.part_id != part_id) continue;
    for (const auto& img : e.images)
      if (seen.insert(img.path).second) out.push_back(img);
  }
  return out;
}

RatingStore::RatingStore(fs::path file) : file_(std::move(file)) {
  for (const auto& row : read_jsonl(file_)) {
    auto r = rating_record_from_json(row);
    by_id_[r.rating_id] = records_.size();
    records_.push_back(std::move(r));
  }
}

std::string RatingStore::submit(RatingRecord record, const RunStore& runs) {
  for (Criterion c : kAllCriteria) {
    const int v = record.score(c);
    if (v < 1 || v > 5)
      fail(ErrorKind::ScoreOutOfRange, fmt::format("{}={} is outside [1,5]", to_string(c), v),
           {{"criterion", to_string(c)}, {"value", v}});
  }
  if (record.rater_id.empty()) fail(ErrorKind::PreconditionViolation, "rater_id is empty");

  const std::string run_id = run_of(record.explanation_id);
  std::optional<Explanation> target;
  if (!run_id.empty() && runs.exists(run_id)) {
    for (auto& e : list_explanations(runs, run_id))
      if (e.explanation_id == record.explanation_id) target = std::move(e);
  }
  if (!target)
    fail(ErrorKind::UnknownExplanation, "unknown explanation: " + record.explanation_id,
         {{"explanation_id", record.explanation_id}});
  if (record.part_id.empty()) record.part_id = target->part_id;
  if (record.part_id != target->part_id)
    fail(ErrorKind::PreconditionViolation,
         fmt::format("part_id {} does not match explanation part {}", record.part_id, target->part_id));
  if (record.created_at.empty()) record.created_at = utc_now_iso8601();

  std::lock_guard lock(mutex_);
  for (const auto& r : records_) {
    if (r.explanation_id == record.explanation_id && r.rater_id == record.rater_id)
      fail(ErrorKind::DuplicateRating,
           fmt::format("{} already rated {}", record.rater_id, record.explanation_id),
           {{"rating_id", r.rating_id}});
  }
  if (record.rating_id.empty())
    record.rating_id = sha256_hex(record.explanation_id + '\n' + record.rater_id).substr(0, 16);
  if (by_id_.count(record.rating_id))
    fail(ErrorKind::DuplicateRating, "rating id already used: " + record.rating_id);
  append_line(file_, to_json(record).dump());
  by_id_[record.rating_id] = records_.size();
  records_.push_back(record);
  return record.rating_id;
}

std::optional<RatingRecord> RatingStore::get(const std::string& rating_id) const {
  std::lock_guard lock(mutex_);
  auto it = by_id_.find(rating_id);
  if (it == by_id_.end()) return std::nullopt;
  return records_[it->second];
}

std::vector<RatingRecord> RatingStore::all() const {
  std::lock_guard lock(mutex_);
  return records_;
}

std::vector<RatingRecord> RatingStore::for_run(const std::string& run_id) const {
  std::lock_guard lock(mutex_);
  std::vector<RatingRecord> out;
  for (const auto& r : records_)
    if (run_of(r.explanation_id) == run_id) out.push_back(r);
  return out;
}

bool RatingStore::has(const std::string& explanation_id, const std::string& rater_id) const {
  std::lock_guard lock(mutex_);
  return std::any_of(records_.begin(), records_.end(), [&](const RatingRecord& r) {
    return r.explanation_id == explanation_id && r.rater_id == rater_id;
  });
}

std::vector<PendingItem> list_pending(const RunStore& runs, const RatingStore& ratings, const std::string& rater_id,
                                      const std::string& run_id) {
  const auto explanations = list_explanations(runs, run_id);
  std::map<std::string, std::vector<ImageRef>> index_space;
  std::vector<PendingItem> out;
  for (const auto& e : explanations) {
    if (ratings.has(e.explanation_id, rater_id)) continue;
    auto it = index_space.find(e.part_id);
    if (it == index_space.end()) it = index_space.emplace(e.part_id, part_images(runs, run_id, e.part_id)).first;
    PendingItem item{e.explanation_id, e.part_id, e.text, {}};
    for (const auto& img : e.images) {
      const auto pos = std::find_if(it->second.begin(), it->second.end(),
                                    [&](const ImageRef& r) { return r.path == img.path; });
      item.image_indices.push_back(static_cast<std::size_t>(pos - it->second.begin()));
    }
    out.push_back(std::move(item));
  }
  return out;
}

}  // namespace vlmh
