#include "vlmh/config.hpp"

#include <cstdlib>

#include "vlmh/error.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

namespace {

EndpointConfig endpoint_from_json(const json& j, const std::string& default_path) {
  EndpointConfig e;
  e.base_url = j.at("base_url").get<std::string>();
  e.path = j.value("path", default_path);
  e.credential_env = j.value("credential_env", std::string());
  e.credential_header = j.value("credential_header", e.credential_header);
  e.credential_prefix = j.value("credential_prefix", e.credential_prefix);
  e.image_limit = j.value("image_limit", e.image_limit);
  if (e.image_limit == 0) fail(ErrorKind::ConfigError, "image_limit must be at least 1");
  return e;
}

fs::path resolve(const fs::path& base, const json& doc, const char* key, const char* fallback) {
  return (base / doc.value(key, std::string(fallback))).lexically_normal();
}

}  // namespace

GatewayOptions HarnessConfig::gateway_options() const {
  GatewayOptions o;
  o.models = models;
  if (!embedding_provider_id.empty()) o.embedders[embedding_provider_id] = embedding_provider;
  o.cache_dir = cache_dir;
  o.mode = gateway_mode;
  o.concurrency_limit = concurrency_limit;
  o.retry = retry;
  return o;
}

HarnessConfig parse_config(const json& doc, const fs::path& base_dir) {
  HarnessConfig c;
  try {
    if (!doc.is_object()) fail(ErrorKind::ConfigError, "config must be a JSON object");
    for (const auto& [id, m] : doc.at("models").items()) c.models[id] = endpoint_from_json(m, "/v1/chat/completions");
    if (doc.contains("embedding_provider")) {
      const auto& e = doc.at("embedding_provider");
      c.embedding_provider_id = e.at("provider_id").get<std::string>();
      c.embedding_provider.endpoint = endpoint_from_json(e, "/v1/embeddings");
      c.embedding_provider.model = e.value("model", std::string());
      c.embedding_provider.dimension = e.value("dimension", 0);
    }
    c.vlm_model_id = doc.at("vlm_model_id").get<std::string>();
    c.judge_model_id = doc.at("judge_model_id").get<std::string>();
    c.paraphrase_model_id = doc.value("paraphrase_model_id", c.vlm_model_id);
    c.icl_model_id = doc.value("icl_model_id", c.vlm_model_id);
    const long long concurrency = doc.value("concurrency_limit", 4LL);
    if (concurrency < 1) fail(ErrorKind::ConfigError, "concurrency_limit must be at least 1");
    c.concurrency_limit = static_cast<std::size_t>(concurrency);
    c.gateway_mode = gateway_mode_from_string(doc.value("gateway_mode", std::string("replay")));
    c.temperature = doc.value("temperature", 0.0);
    c.max_output_tokens = doc.value("max_output_tokens", 1024);
    if (doc.contains("retry")) {
      const auto& r = doc.at("retry");
      c.retry.max_attempts = r.value("max_attempts", c.retry.max_attempts);
      c.retry.initial_backoff = std::chrono::milliseconds(r.value("initial_backoff_ms", 1000));
      c.retry.max_backoff = std::chrono::milliseconds(r.value("max_backoff_ms", 32000));
      if (c.retry.max_attempts < 1) fail(ErrorKind::ConfigError, "retry.max_attempts must be at least 1");
    }
    c.cache_dir = resolve(base_dir, doc, "cache_dir", "cache");
    c.runs_dir = resolve(base_dir, doc, "runs_dir", "runs");
    c.prompts_dir = resolve(base_dir, doc, "prompts_dir", "prompts");
    c.manifest = resolve(base_dir, doc, "manifest", "manifest.json");
    c.prompt_set = doc.value("prompt_set", c.prompt_set);
    c.ratings_file = resolve(base_dir, doc, "ratings_file", "ratings.jsonl");
    if (doc.contains("static_dir")) c.static_dir = resolve(base_dir, doc, "static_dir", "");
  } catch (const json::exception& e) {
    fail(ErrorKind::ConfigError, std::string("invalid config: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ConfigError) throw;
    fail(ErrorKind::ConfigError, e.what());
  }
  for (const auto* id : {&c.vlm_model_id, &c.judge_model_id, &c.paraphrase_model_id, &c.icl_model_id})
    if (!c.models.contains(*id))
      fail(ErrorKind::ConfigError, "model " + *id + " is referenced but not configured", {{"model_id", *id}});
  return c;
}

HarnessConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::ConfigError, "config file not found: " + path.string());
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::ConfigError, path.string() + ": " + e.what());
  }
  const auto base = fs::absolute(path).lexically_normal().parent_path();
  return parse_config(doc, base);
}

fs::path resolve_config_path(const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("VLMHARNESS_CONFIG"); env && *env) return env;
  return "harness.json";
}

}  // namespace vlmh
