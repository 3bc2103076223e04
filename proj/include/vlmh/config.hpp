#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "vlmh/gateway.hpp"

namespace vlmh {

/// Contents of harness.json. Relative paths are resolved against the
/// directory holding the file. Credentials never live here: each endpoint
/// names the environment variable that holds its key.
struct HarnessConfig {
  std::map<std::string, EndpointConfig> models;
  std::string embedding_provider_id;
  EmbeddingProviderConfig embedding_provider;
  std::string vlm_model_id;
  std::string judge_model_id;
  std::string paraphrase_model_id;  // defaults to vlm_model_id
  std::string icl_model_id;         // defaults to vlm_model_id
  std::size_t concurrency_limit = 4;
  GatewayMode gateway_mode = GatewayMode::replay;
  double temperature = 0.0;
  int max_output_tokens = 1024;
  RetryPolicy retry;

  std::filesystem::path cache_dir;
  std::filesystem::path runs_dir;
  std::filesystem::path prompts_dir;
  std::filesystem::path manifest;
  std::string prompt_set = "default";  // prompts/<prompt_set>.json
  std::filesystem::path ratings_file;
  std::optional<std::filesystem::path> static_dir;

  std::filesystem::path prompt_set_path() const { return prompts_dir / (prompt_set + ".json"); }
  GatewayOptions gateway_options() const;
};

/// Throws ConfigError for missing fields, unknown model references or
/// concurrency_limit < 1.
HarnessConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);
HarnessConfig load_config(const std::filesystem::path& path);

/// --config if given, else $VLMHARNESS_CONFIG, else ./harness.json.
std::filesystem::path resolve_config_path(const std::optional<std::string>& flag);

}  // namespace vlmh
