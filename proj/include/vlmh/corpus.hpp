#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace vlmh {

enum class MediaType { png, jpeg };

std::string to_string(MediaType type);
MediaType media_type_from_string(const std::string& name);

/// Sniffs PNG/JPEG magic bytes; nullopt for anything else.
std::optional<MediaType> sniff_media_type(std::string_view head);

struct ImageRef {
  std::filesystem::path path;
  MediaType media_type = MediaType::png;

  bool operator==(const ImageRef&) const = default;
};

struct PartRecord {
  std::string part_id;
  std::optional<std::string> display_name;
  /// distribution_id -> ordered images; std::map keeps ids sorted.
  std::map<std::string, std::vector<ImageRef>> distributions;

  bool operator==(const PartRecord&) const = default;
};

struct MixSpec {
  std::string mix_id;
  std::vector<std::string> sources;
  std::uint32_t count = 1;
  std::uint64_t seed = 0;

  bool operator==(const MixSpec&) const = default;
};

struct Manifest {
  int version = 1;
  std::vector<PartRecord> parts;
  std::vector<MixSpec> mixed_distributions;

  const PartRecord& part(const std::string& part_id) const;
  const MixSpec* mix(const std::string& mix_id) const;

  bool operator==(const Manifest&) const = default;
};

/// Parses and validates a manifest document. Relative image paths resolve
/// against `base_dir`; the returned ImageRefs carry the resolved paths.
Manifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir);

/// Reads `path` and validates it. Throws ParseError, MissingImage or
/// DuplicatePartId.
Manifest load_manifest(const std::filesystem::path& path);

nlohmann::json to_json(const Manifest& manifest);

/// Draws `spec.count` images round-robin over `spec.sources`. The pick within
/// a source follows a shuffle seeded from (spec.seed, part_id), so the result
/// is identical on every platform. A source that runs dry is skipped; the
/// call fails with InsufficientImages when the pooled sources hold fewer than
/// `spec.count` images.
std::vector<ImageRef> materialize_mix(const PartRecord& part, const MixSpec& spec);

/// Images the experiment sends for (part, distribution_id): the part's own
/// list, or the materialized mix when `distribution_id` names a MixSpec.
std::vector<ImageRef> images_for(const Manifest& manifest, const PartRecord& part,
                                 const std::string& distribution_id,
                                 std::optional<std::uint64_t> seed_override = std::nullopt);

/// Every distribution id usable for `part`: its own plus all mixes.
std::vector<std::string> distribution_ids(const Manifest& manifest);

}  // namespace vlmh
