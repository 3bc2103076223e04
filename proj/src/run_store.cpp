#include <algorithm>
#include <map>
#include <set>

#include <fmt/format.h>

#include "vlmh/error.hpp"
#include "vlmh/experiment.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

bool OutputMatrix::complete(std::size_t paraphrase_count) const {
  if (outputs.size() != paraphrase_count) return false;
  for (std::size_t i = 0; i < outputs.size(); ++i)
    if (outputs[i].paraphrase_index != i) return false;
  return true;
}

std::vector<std::string> OutputMatrix::texts() const {
  std::vector<std::string> t;
  t.reserve(outputs.size());
  for (const auto& o : outputs) t.push_back(o.text);
  return t;
}

json to_json(const CellRef& c) {
  return {{"part_id", c.part_id}, {"distribution_id", c.distribution_id}, {"paraphrase_index", c.paraphrase_index}};
}

json to_json(const RunRecord& r) {
  return {{"run_id", r.run_id},
          {"manifest_digest", r.manifest_digest},
          {"prompt_set_digest", r.prompt_set_digest},
          {"mode", to_string(r.mode)},
          {"created_at", r.created_at},
          {"seed", r.seed},
          {"model_id", r.model_id},
          {"distribution_ids", r.distribution_ids},
          {"paraphrase_count", r.paraphrase_count}};
}

RunRecord run_record_from_json(const json& j) {
  try {
    RunRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.manifest_digest = j.at("manifest_digest").get<std::string>();
    r.prompt_set_digest = j.at("prompt_set_digest").get<std::string>();
    r.mode = gateway_mode_from_string(j.at("mode").get<std::string>());
    r.created_at = j.at("created_at").get<std::string>();
    r.seed = j.value("seed", std::uint64_t{0});
    r.model_id = j.value("model_id", std::string());
    r.distribution_ids = j.value("distribution_ids", std::vector<std::string>{});
    r.paraphrase_count = j.value("paraphrase_count", std::size_t{0});
    return r;
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("malformed run.json: ") + e.what());
  }
}

fs::path RunStore::run_dir(const std::string& run_id) const {
  if (run_id.empty() || run_id.find('/') != std::string::npos || run_id.find('\\') != std::string::npos ||
      run_id == "." || run_id == "..")
    fail(ErrorKind::PreconditionViolation, "invalid run id: \"" + run_id + "\"");
  return root_ / run_id;
}

bool RunStore::exists(const std::string& run_id) const { return fs::exists(run_dir(run_id) / "run.json"); }

void RunStore::require(const std::string& run_id) const {
  if (!exists(run_id)) fail(ErrorKind::UnknownRun, "unknown run: " + run_id, {{"run_id", run_id}});
}

std::vector<std::string> RunStore::list_runs() const {
  std::vector<std::string> ids;
  if (!fs::exists(root_)) return ids;
  for (const auto& entry : fs::directory_iterator(root_))
    if (entry.is_directory() && fs::exists(entry.path() / "run.json")) ids.push_back(entry.path().filename().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

void RunStore::write_record(const RunRecord& record) const {
  write_file_atomic(run_dir(record.run_id) / "run.json", to_json(record).dump(2) + "\n");
}

RunRecord RunStore::read_record(const std::string& run_id) const {
  require(run_id);
  return run_record_from_json(read_json_file(run_dir(run_id) / "run.json"));
}

void RunStore::write_inputs(const std::string& run_id, const std::vector<CellInputs>& inputs) const {
  json cells = json::array();
  for (const auto& c : inputs) {
    json images = json::array();
    for (const auto& img : c.images)
      images.push_back({{"path", img.path.generic_string()}, {"media_type", to_string(img.media_type)}});
    cells.push_back({{"part_id", c.part_id}, {"distribution_id", c.distribution_id}, {"images", std::move(images)}});
  }
  write_file_atomic(run_dir(run_id) / "inputs.json", json{{"cells", std::move(cells)}}.dump(2) + "\n");
}

std::vector<CellInputs> RunStore::read_inputs(const std::string& run_id) const {
  const auto path = run_dir(run_id) / "inputs.json";
  std::vector<CellInputs> out;
  if (!fs::exists(path)) return out;
  const json doc = read_json_file(path);
  for (const auto& c : doc.at("cells")) {
    CellInputs ci{c.at("part_id").get<std::string>(), c.at("distribution_id").get<std::string>(), {}};
    for (const auto& img : c.at("images"))
      ci.images.push_back({img.at("path").get<std::string>(), media_type_from_string(img.at("media_type").get<std::string>())});
    out.push_back(std::move(ci));
  }
  return out;
}

void RunStore::append_output(const std::string& run_id, const CellRef& cell, const ChatResponse& response) const {
  json meta = to_json(response);
  meta.erase("text");
  json row = to_json(cell);
  row["text"] = response.text;
  row["meta"] = std::move(meta);
  append_line(run_dir(run_id) / "outputs.jsonl", row.dump());
}

std::vector<OutputMatrix> RunStore::read_outputs(const std::string& run_id) const {
  const auto rows = read_jsonl(run_dir(run_id) / "outputs.jsonl");

  // Matrix order follows inputs.json, falling back to first appearance.
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, OutputMatrix> groups;
  for (const auto& c : read_inputs(run_id)) {
    auto key = std::make_pair(c.part_id, c.distribution_id);
    if (groups.emplace(key, OutputMatrix{c.part_id, c.distribution_id, {}}).second) order.push_back(key);
  }
  for (const auto& row : rows) {
    try {
      auto key = std::make_pair(row.at("part_id").get<std::string>(), row.at("distribution_id").get<std::string>());
      auto [it, inserted] = groups.emplace(key, OutputMatrix{key.first, key.second, {}});
      if (inserted) order.push_back(key);
      const auto index = row.at("paraphrase_index").get<std::size_t>();
      auto& outs = it->second.outputs;
      if (std::any_of(outs.begin(), outs.end(), [&](const OutputCell& o) { return o.paraphrase_index == index; }))
        continue;
      json meta = row.at("meta");
      meta["text"] = row.at("text");
      outs.push_back({index, row.at("text").get<std::string>(), chat_response_from_json(meta)});
    } catch (const json::exception& e) {
      fail(ErrorKind::ParseError, std::string("malformed outputs.jsonl row: ") + e.what());
    }
  }
  std::vector<OutputMatrix> out;
  out.reserve(order.size());
  for (const auto& key : order) {
    auto m = std::move(groups.at(key));
    std::sort(m.outputs.begin(), m.outputs.end(),
              [](const OutputCell& a, const OutputCell& b) { return a.paraphrase_index < b.paraphrase_index; });
    out.push_back(std::move(m));
  }
  return out;
}

void RunStore::write_holes(const std::string& run_id, const std::vector<CellRef>& holes) const {
  json arr = json::array();
  for (const auto& h : holes) arr.push_back(to_json(h));
  write_file_atomic(run_dir(run_id) / "holes.json", json{{"holes", std::move(arr)}}.dump(2) + "\n");
}

std::vector<CellRef> RunStore::read_holes(const std::string& run_id) const {
  const auto path = run_dir(run_id) / "holes.json";
  std::vector<CellRef> holes;
  if (!fs::exists(path)) return holes;
  const json doc = read_json_file(path);
  for (const auto& h : doc.at("holes"))
    holes.push_back({h.at("part_id").get<std::string>(), h.at("distribution_id").get<std::string>(),
                     h.at("paraphrase_index").get<std::size_t>()});
  return holes;
}

void RunStore::write_artifact(const std::string& run_id, const std::string& name, const std::string& contents) const {
  write_file_atomic(run_dir(run_id) / name, contents);
}

std::string RunStore::read_artifact(const std::string& run_id, const std::string& name) const {
  return read_file(run_dir(run_id) / name);
}

}  // namespace vlmh
