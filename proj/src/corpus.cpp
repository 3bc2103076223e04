#include "vlmh/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "vlmh/error.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Unbiased draw in [0, bound) by rejection.
std::uint64_t bounded(std::uint64_t& state, std::uint64_t bound) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  for (;;) {
    const std::uint64_t r = splitmix64(state);
    if (r < limit) return r % bound;
  }
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t state) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(bounded(state, i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

[[noreturn]] void schema(const std::string& what) {
  fail(ErrorKind::ParseError, "manifest: " + what);
}

const nlohmann::json& require(const nlohmann::json& obj, const char* key,
                              const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) schema(where + " is missing \"" + key + "\"");
  return obj.at(key);
}

std::string require_string(const nlohmann::json& obj, const char* key, const std::string& where) {
  const auto& v = require(obj, key, where);
  if (!v.is_string()) schema(where + "." + key + " must be a string");
  return v.get<std::string>();
}

ImageRef parse_image(const nlohmann::json& j, const fs::path& base_dir, const std::string& where) {
  ImageRef ref;
  ref.path = (base_dir / fs::path(require_string(j, "path", where))).lexically_normal();
  try {
    ref.media_type = media_type_from_string(require_string(j, "media_type", where));
  } catch (const Error&) {
    schema(where + ".media_type must be \"png\" or \"jpeg\"");
  }
  std::ifstream in(ref.path, std::ios::binary);
  if (!in) {
    fail(ErrorKind::MissingImage, "image not found: " + ref.path.string(),
         {{"path", ref.path.string()}});
  }
  char head[8] = {};
  in.read(head, sizeof head);
  const auto sniffed = sniff_media_type(std::string_view(head, static_cast<std::size_t>(in.gcount())));
  if (sniffed != ref.media_type) {
    schema(fmt::format("{} declares {} but its bytes do not match", ref.path.string(),
                       to_string(ref.media_type)));
  }
  return ref;
}

}  // namespace

std::string to_string(MediaType type) { return type == MediaType::png ? "png" : "jpeg"; }

MediaType media_type_from_string(const std::string& name) {
  if (name == "png") return MediaType::png;
  if (name == "jpeg" || name == "jpg") return MediaType::jpeg;
  fail(ErrorKind::ParseError, "unknown media type: " + name);
}

std::optional<MediaType> sniff_media_type(std::string_view head) {
  static constexpr std::string_view kPng("\x89PNG\r\n\x1a\n", 8);
  static constexpr std::string_view kJpeg("\xFF\xD8\xFF", 3);
  if (head.substr(0, kPng.size()) == kPng) return MediaType::png;
  if (head.substr(0, kJpeg.size()) == kJpeg) return MediaType::jpeg;
  return std::nullopt;
}

const PartRecord& Manifest::part(const std::string& part_id) const {
  for (const auto& p : parts)
    if (p.part_id == part_id) return p;
  fail(ErrorKind::PreconditionViolation, "unknown part_id: " + part_id);
}

const MixSpec* Manifest::mix(const std::string& mix_id) const {
  for (const auto& m : mixed_distributions)
    if (m.mix_id == mix_id) return &m;
  return nullptr;
}

Manifest parse_manifest(const nlohmann::json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) schema("top level must be an object");
  Manifest m;
  const auto& version = require(doc, "version", "manifest");
  if (!version.is_number_integer()) schema("version must be an integer");
  m.version = version.get<int>();
  if (m.version != 1) schema(fmt::format("unsupported version {}", m.version));

  const auto& parts = require(doc, "parts", "manifest");
  if (!parts.is_array()) schema("parts must be an array");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string where = fmt::format("parts[{}]", i);
    const auto& pj = parts[i];
    PartRecord part;
    part.part_id = require_string(pj, "part_id", where);
    if (part.part_id.empty()) schema(where + ".part_id is empty");
    if (!seen.insert(part.part_id).second) {
      fail(ErrorKind::DuplicatePartId, "duplicate part_id: " + part.part_id,
           {{"part_id", part.part_id}});
    }
    if (pj.contains("display_name") && !pj.at("display_name").is_null())
      part.display_name = require_string(pj, "display_name", where);
    const auto& dists = require(pj, "distributions", where);
    if (!dists.is_object()) schema(where + ".distributions must be an object");
    for (const auto& [dist_id, images] : dists.items()) {
      const std::string dwhere = where + ".distributions." + dist_id;
      if (!images.is_array() || images.empty()) schema(dwhere + " must be a non-empty array");
      auto& list = part.distributions[dist_id];
      for (std::size_t k = 0; k < images.size(); ++k)
        list.push_back(parse_image(images[k], base_dir, fmt::format("{}[{}]", dwhere, k)));
    }
    m.parts.push_back(std::move(part));
  }

  if (doc.contains("mixed_distributions")) {
    const auto& mixes = doc.at("mixed_distributions");
    if (!mixes.is_array()) schema("mixed_distributions must be an array");
    for (std::size_t i = 0; i < mixes.size(); ++i) {
      const std::string where = fmt::format("mixed_distributions[{}]", i);
      const auto& mj = mixes[i];
      MixSpec spec;
      spec.mix_id = require_string(mj, "mix_id", where);
      const auto& sources = require(mj, "sources", where);
      if (!sources.is_array() || sources.empty()) schema(where + ".sources must be a non-empty array");
      for (const auto& s : sources) {
        if (!s.is_string()) schema(where + ".sources entries must be strings");
        spec.sources.push_back(s.get<std::string>());
      }
      const auto& count = require(mj, "count", where);
      if (!count.is_number_integer() || count.get<long long>() < 1) schema(where + ".count must be >= 1");
      spec.count = count.get<std::uint32_t>();
      const auto& seed = require(mj, "seed", where);
      if (!seed.is_number_integer() || (seed.is_number_integer() && !seed.is_number_unsigned() && seed.get<long long>() < 0))
        schema(where + ".seed must be a non-negative integer");
      spec.seed = seed.get<std::uint64_t>();
      for (const auto& part : m.parts) {
        if (part.distributions.count(spec.mix_id))
          schema(fmt::format("{}: mix_id {} collides with a distribution of part {}", where, spec.mix_id, part.part_id));
        for (const auto& src : spec.sources)
          if (!part.distributions.count(src))
            schema(fmt::format("{}: source {} missing on part {}", where, src, part.part_id));
      }
      if (m.mix(spec.mix_id)) schema(where + ": duplicate mix_id " + spec.mix_id);
      m.mixed_distributions.push_back(std::move(spec));
    }
  }
  return m;
}

Manifest load_manifest(const fs::path& path) {
  const auto doc = read_json_file(path);
  return parse_manifest(doc, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

nlohmann::json to_json(const Manifest& manifest) {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : manifest.parts) {
    nlohmann::json dists = nlohmann::json::object();
    for (const auto& [id, images] : p.distributions) {
      nlohmann::json list = nlohmann::json::array();
      for (const auto& img : images)
        list.push_back({{"path", img.path.generic_string()}, {"media_type", to_string(img.media_type)}});
      dists[id] = std::move(list);
    }
    nlohmann::json pj = {{"part_id", p.part_id}, {"distributions", std::move(dists)}};
    if (p.display_name) pj["display_name"] = *p.display_name;
    parts.push_back(std::move(pj));
  }
  nlohmann::json mixes = nlohmann::json::array();
  for (const auto& m : manifest.mixed_distributions)
    mixes.push_back({{"mix_id", m.mix_id}, {"sources", m.sources}, {"count", m.count}, {"seed", m.seed}});
  return {{"version", manifest.version}, {"parts", std::move(parts)}, {"mixed_distributions", std::move(mixes)}};
}

std::vector<ImageRef> materialize_mix(const PartRecord& part, const MixSpec& spec) {
  if (spec.sources.empty() || spec.count < 1)
    fail(ErrorKind::PreconditionViolation, "mix " + spec.mix_id + " needs sources and count >= 1");
  std::vector<const std::vector<ImageRef>*> pools;
  std::size_t total = 0;
  for (const auto& src : spec.sources) {
    auto it = part.distributions.find(src);
    if (it == part.distributions.end())
      fail(ErrorKind::PreconditionViolation,
           fmt::format("part {} has no distribution {} required by mix {}", part.part_id, src, spec.mix_id));
    pools.push_back(&it->second);
    total += it->second.size();
  }
  if (total < spec.count) {
    fail(ErrorKind::InsufficientImages,
         fmt::format("mix {} wants {} images but part {} only has {} across its sources", spec.mix_id,
                     spec.count, part.part_id, total),
         {{"part_id", part.part_id}, {"mix_id", spec.mix_id}, {"available", total}, {"count", spec.count}});
  }

  const std::uint64_t part_seed = spec.seed ^ fnv1a64(part.part_id);
  std::vector<std::vector<std::size_t>> orders;
  for (std::size_t s = 0; s < pools.size(); ++s) {
    std::uint64_t state = part_seed ^ fnv1a64(spec.sources[s]);
    orders.push_back(shuffled_indices(pools[s]->size(), splitmix64(state)));
  }

  std::vector<ImageRef> out;
  out.reserve(spec.count);
  std::vector<std::size_t> taken(pools.size(), 0);
  for (std::size_t turn = 0; out.size() < spec.count; ++turn) {
    const std::size_t s = turn % pools.size();
    if (taken[s] < orders[s].size()) out.push_back((*pools[s])[orders[s][taken[s]++]]);
  }
  return out;
}

std::vector<ImageRef> images_for(const Manifest& manifest, const PartRecord& part,
                                 const std::string& distribution_id,
                                 std::optional<std::uint64_t> seed_override) {
  if (const auto* mix = manifest.mix(distribution_id)) {
    MixSpec spec = *mix;
    if (seed_override) spec.seed = *seed_override;
    return materialize_mix(part, spec);
  }
  auto it = part.distributions.find(distribution_id);
  if (it == part.distributions.end())
    fail(ErrorKind::PreconditionViolation,
         fmt::format("part {} has no distribution {}", part.part_id, distribution_id));
  return it->second;
}

std::vector<std::string> distribution_ids(const Manifest& manifest) {
  std::set<std::string> own;
  for (const auto& p : manifest.parts)
    for (const auto& [id, _] : p.distributions) own.insert(id);
  std::vector<std::string> ids(own.begin(), own.end());
  for (const auto& m : manifest.mixed_distributions) ids.push_back(m.mix_id);
  return ids;
}

}  // namespace vlmh
