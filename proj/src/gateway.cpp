#include "vlmh/gateway.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <random>
#include <thread>

#include <fmt/format.h>

#include "vlmh/error.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

namespace {

void validate(const ChatRequest& r) {
  if (r.user_text.empty()) fail(ErrorKind::PreconditionViolation, "chat request has empty user_text");
  if (r.images.size() > kMaxImagesPerRequest)
    fail(ErrorKind::TooManyImages, fmt::format("{} images exceed the per-request cap of {}",
                                               r.images.size(), kMaxImagesPerRequest));
  if (!(r.temperature >= 0.0 && r.temperature <= 1.0))
    fail(ErrorKind::PreconditionViolation, "temperature must lie in [0,1]");
  if (r.max_output_tokens <= 0) fail(ErrorKind::PreconditionViolation, "max_output_tokens must be positive");
}

std::string read_image(const ImageRef& img) {
  try {
    return read_file(img.path);
  } catch (const Error&) {
    fail(ErrorKind::MissingImage, "image not readable: " + img.path.string(), {{"path", img.path.string()}});
  }
}

std::string mime(MediaType t) { return t == MediaType::png ? "image/png" : "image/jpeg"; }

std::string wire_chat_body(const ChatRequest& r) {
  json messages = json::array();
  if (r.system_text) messages.push_back({{"role", "system"}, {"content", *r.system_text}});
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", r.user_text}});
  for (const auto& img : r.images) {
    content.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:" + mime(img.media_type) + ";base64," +
                                                  base64_encode(read_image(img))}}}});
  }
  messages.push_back({{"role", "user"}, {"content", std::move(content)}});
  return json{{"model", r.model_id},
              {"messages", std::move(messages)},
              {"temperature", r.temperature},
              {"max_tokens", r.max_output_tokens}}
      .dump();
}

ChatResponse parse_chat_wire(const json& body, const std::string& model_id) {
  try {
    const auto& choice = body.at("choices").at(0);
    ChatResponse resp;
    const auto& content = choice.at("message").at("content");
    resp.text = content.is_null() ? std::string() : content.get<std::string>();
    resp.model_id = body.contains("model") ? body.at("model").get<std::string>() : model_id;
    const std::string reason = choice.value("finish_reason", std::string("stop"));
    if (reason == "stop") resp.finish_reason = FinishReason::stop;
    else if (reason == "length") resp.finish_reason = FinishReason::length;
    else if (reason == "content_filter") resp.finish_reason = FinishReason::filtered;
    else resp.finish_reason = FinishReason::error;
    if (body.contains("usage")) {
      resp.usage.prompt_tokens = body.at("usage").value("prompt_tokens", 0);
      resp.usage.completion_tokens = body.at("usage").value("completion_tokens", 0);
    }
    if (resp.text.empty() && resp.finish_reason == FinishReason::stop)
      fail(ErrorKind::GatewayError, "model " + model_id + " returned an empty completion");
    return resp;
  } catch (const json::exception& e) {
    fail(ErrorKind::GatewayError, "malformed chat response from " + model_id + ": " + e.what());
  }
}

EmbeddingVector to_embedding(const json& values, const std::string& provider_id, Eigen::Index expected) {
  if (!values.is_array()) fail(ErrorKind::GatewayError, "embedding response is not an array");
  const auto n = static_cast<Eigen::Index>(values.size());
  if (expected > 0 && n != expected) {
    fail(ErrorKind::DimensionMismatch,
         fmt::format("provider {} declares dimension {} but returned {} values", provider_id, expected, n),
         {{"provider_id", provider_id}, {"expected", expected}, {"actual", n}});
  }
  EmbeddingVector v{Eigen::VectorXd(n), provider_id};
  for (Eigen::Index i = 0; i < n; ++i) v.values[i] = values[static_cast<std::size_t>(i)].get<double>();
  if (n == 0 || v.values.isZero(0.0))
    fail(ErrorKind::DegenerateVector, "provider " + provider_id + " returned an all-zero embedding");
  return v;
}

// Holds one of the gateway's concurrency slots for the scope.
class SlotGuard {
 public:
  explicit SlotGuard(std::counting_semaphore<1024>& s) : s_(s) { s_.acquire(); }
  ~SlotGuard() { s_.release(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

 private:
  std::counting_semaphore<1024>& s_;
};

}  // namespace

std::string to_string(GatewayMode mode) {
  switch (mode) {
    case GatewayMode::live: return "live";
    case GatewayMode::record: return "record";
    case GatewayMode::replay: return "replay";
  }
  return "replay";
}

GatewayMode gateway_mode_from_string(const std::string& name) {
  if (name == "live") return GatewayMode::live;
  if (name == "record") return GatewayMode::record;
  if (name == "replay") return GatewayMode::replay;
  fail(ErrorKind::ConfigError, "unknown gateway mode: " + name);
}

std::string to_string(FinishReason reason) {
  switch (reason) {
    case FinishReason::stop: return "stop";
    case FinishReason::length: return "length";
    case FinishReason::filtered: return "filtered";
    case FinishReason::error: return "error";
  }
  return "error";
}

FinishReason finish_reason_from_string(const std::string& name) {
  if (name == "stop") return FinishReason::stop;
  if (name == "length") return FinishReason::length;
  if (name == "filtered") return FinishReason::filtered;
  if (name == "error") return FinishReason::error;
  fail(ErrorKind::ParseError, "unknown finish_reason: " + name);
}

json to_json(const ChatResponse& r) {
  return {{"text", r.text},
          {"model_id", r.model_id},
          {"finish_reason", to_string(r.finish_reason)},
          {"usage", {{"prompt_tokens", r.usage.prompt_tokens}, {"completion_tokens", r.usage.completion_tokens}}}};
}

ChatResponse chat_response_from_json(const json& j) {
  try {
    ChatResponse r;
    r.text = j.at("text").get<std::string>();
    r.model_id = j.at("model_id").get<std::string>();
    r.finish_reason = finish_reason_from_string(j.at("finish_reason").get<std::string>());
    if (j.contains("usage")) {
      r.usage.prompt_tokens = j.at("usage").value("prompt_tokens", 0);
      r.usage.completion_tokens = j.at("usage").value("completion_tokens", 0);
    }
    return r;
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("malformed chat response record: ") + e.what());
  }
}

ChatRequest chat_request_from_json(const json& j) {
  try {
    ChatRequest r;
    r.model_id = j.at("model_id").get<std::string>();
    if (j.contains("system_text") && !j.at("system_text").is_null())
      r.system_text = j.at("system_text").get<std::string>();
    r.user_text = j.at("user_text").get<std::string>();
    r.temperature = j.value("temperature", 0.0);
    r.max_output_tokens = j.value("max_output_tokens", 1024);
    for (const auto& img : j.value("images", json::array())) {
      r.images.push_back({img.at("path").get<std::string>(),
                          media_type_from_string(img.at("media_type").get<std::string>())});
    }
    return r;
  } catch (const json::exception& e) {
    fail(ErrorKind::ParseError, std::string("malformed chat request: ") + e.what());
  }
}

json canonical_request(const ChatRequest& r) {
  json images = json::array();
  for (const auto& img : r.images)
    images.push_back({{"media_type", to_string(img.media_type)}, {"sha256", sha256_hex(read_image(img))}});
  return {{"kind", "chat"},
          {"model_id", r.model_id},
          {"system_text", r.system_text ? json(*r.system_text) : json(nullptr)},
          {"user_text", r.user_text},
          {"images", std::move(images)},
          {"temperature", r.temperature},
          {"max_output_tokens", r.max_output_tokens}};
}

json canonical_embedding_request(const std::string& text, const std::string& provider_id) {
  return {{"kind", "embedding"}, {"provider_id", provider_id}, {"text", text}};
}

CacheKey cache_key(const json& canonical) { return {sha256_hex(canonical.dump())}; }

std::string default_credential_env(const std::string& model_id) {
  std::string name = "VLMHARNESS_API_KEY_";
  for (unsigned char c : model_id) name.push_back(std::isalnum(c) ? static_cast<char>(std::toupper(c)) : '_');
  return name;
}

Gateway::Gateway(GatewayOptions options, std::shared_ptr<Transport> transport)
    : options_(std::move(options)),
      transport_(std::move(transport)),
      mode_(options_.mode),
      slots_(static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(options_.concurrency_limit, 1, 1024))) {
  if (!options_.sleeper) options_.sleeper = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  if (!options_.env_lookup) {
    options_.env_lookup = [](const std::string& name) -> std::optional<std::string> {
      const char* v = std::getenv(name.c_str());
      return v ? std::optional<std::string>(v) : std::nullopt;
    };
  }
}

void Gateway::set_mode(GatewayMode mode) {
  std::lock_guard lock(mutex_);
  mode_ = mode;
}

GatewayMode Gateway::mode() const {
  std::lock_guard lock(mutex_);
  return mode_;
}

std::size_t Gateway::image_limit(const std::string& model_id) const {
  auto it = options_.models.find(model_id);
  const std::size_t limit = it == options_.models.end() ? kMaxImagesPerRequest : it->second.image_limit;
  return std::min(limit, kMaxImagesPerRequest);
}

std::filesystem::path Gateway::cache_path(const CacheKey& key) const {
  return options_.cache_dir / key.shard() / (key.digest + ".json");
}

std::optional<json> Gateway::read_cache(const CacheKey& key) const {
  const auto path = cache_path(key);
  if (!fs::exists(path)) return std::nullopt;
  return read_json_file(path).at("response");
}

void Gateway::write_cache(const CacheKey& key, const json& canonical, const json& response) {
  const json entry = {{"key", key.digest}, {"request", canonical}, {"response", response},
                      {"recorded_at", utc_now_iso8601()}};
  write_file_atomic(cache_path(key), entry.dump(2) + "\n");
}

std::string Gateway::credential(const EndpointConfig& endpoint, const std::string& id) const {
  const std::string var = endpoint.credential_env.empty() ? default_credential_env(id) : endpoint.credential_env;
  const auto value = options_.env_lookup(var);
  if (!value || value->empty())
    fail(ErrorKind::AuthError, "no credential for " + id + ": set " + var, {{"env", var}});
  return *value;
}

json Gateway::send_with_retries(const EndpointConfig& endpoint, const std::string& id, const std::string& body) {
  HttpRequest req{endpoint.base_url, endpoint.path, {{"Content-Type", "application/json"}}, body};
  req.headers[endpoint.credential_header] = endpoint.credential_prefix + credential(endpoint, id);

  thread_local std::mt19937_64 jitter_rng{std::random_device{}()};
  HttpResponse last;
  const int attempts = std::max(1, options_.retry.max_attempts);
  for (int attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0) {
      const double base = std::min<double>(
          static_cast<double>(options_.retry.max_backoff.count()),
          static_cast<double>(options_.retry.initial_backoff.count()) * std::ldexp(1.0, attempt - 1));
      std::uniform_real_distribution<double> jitter(0.5, 1.0);
      options_.sleeper(std::chrono::milliseconds(static_cast<long long>(base * jitter(jitter_rng))));
    }
    {
      SlotGuard slot(slots_);
      last = transport_->post(req);
    }
    if (last.status >= 200 && last.status < 300) {
      try {
        return json::parse(last.body);
      } catch (const json::parse_error& e) {
        fail(ErrorKind::GatewayError, id + " returned a non-JSON body: " + e.what());
      }
    }
    if (last.status == 401 || last.status == 403)
      fail(ErrorKind::AuthError, fmt::format("{} rejected the credential (HTTP {})", id, last.status),
           {{"status", last.status}});
    const bool retryable = last.status == 0 || last.status == 429 || last.status >= 500;
    if (!retryable)
      fail(ErrorKind::GatewayError, fmt::format("{} returned HTTP {}: {}", id, last.status, last.body),
           {{"status", last.status}});
  }
  if (last.status == 429)
    fail(ErrorKind::RateLimited, fmt::format("{} still rate limited after {} attempts", id, attempts),
         {{"attempts", attempts}});
  fail(ErrorKind::NetworkError,
       fmt::format("{} unreachable after {} attempts: {}", id, attempts,
                   last.status == 0 ? last.error : fmt::format("HTTP {}", last.status)),
       {{"attempts", attempts}, {"status", last.status}});
}

ChatResponse Gateway::chat(const ChatRequest& request) {
  validate(request);
  const auto limit = image_limit(request.model_id);
  if (request.images.size() > limit)
    fail(ErrorKind::TooManyImages,
         fmt::format("{} images exceed the limit of {} for {}", request.images.size(), limit, request.model_id));

  const json canonical = canonical_request(request);
  const CacheKey key = cache_key(canonical);
  const GatewayMode mode = this->mode();

  if (mode != GatewayMode::live) {
    if (auto cached = read_cache(key)) return chat_response_from_json(*cached);
    if (mode == GatewayMode::replay)
      fail(ErrorKind::ReplayMiss, "no recorded response for chat request " + key.digest,
           {{"digest", key.digest}, {"model_id", request.model_id}});
  }

  auto it = options_.models.find(request.model_id);
  if (it == options_.models.end())
    fail(ErrorKind::ConfigError, "model " + request.model_id + " has no endpoint configured");
  const json body = send_with_retries(it->second, request.model_id, wire_chat_body(request));
  ChatResponse response = parse_chat_wire(body, request.model_id);
  if (mode == GatewayMode::record) write_cache(key, canonical, to_json(response));
  return response;
}

EmbeddingVector Gateway::embed(const std::string& text, const std::string& provider_id) {
  if (text.empty()) fail(ErrorKind::PreconditionViolation, "cannot embed an empty string");
  const json canonical = canonical_embedding_request(text, provider_id);
  const CacheKey key = cache_key(canonical);
  {
    std::lock_guard lock(mutex_);
    if (auto it = embed_memo_.find(key.digest); it != embed_memo_.end()) return it->second;
  }

  auto provider = options_.embedders.find(provider_id);
  const Eigen::Index expected = provider == options_.embedders.end() ? 0 : provider->second.dimension;
  const GatewayMode mode = this->mode();

  std::optional<EmbeddingVector> result;
  if (mode != GatewayMode::live) {
    if (auto cached = read_cache(key)) result = to_embedding(cached->at("values"), provider_id, expected);
    else if (mode == GatewayMode::replay)
      fail(ErrorKind::ReplayMiss, "no recorded embedding for request " + key.digest,
           {{"digest", key.digest}, {"provider_id", provider_id}});
  }
  if (!result) {
    if (provider == options_.embedders.end())
      fail(ErrorKind::ConfigError, "embedding provider " + provider_id + " is not configured");
    const auto& cfg = provider->second;
    const json wire = {{"model", cfg.model.empty() ? provider_id : cfg.model}, {"input", text}};
    const json body = send_with_retries(cfg.endpoint, provider_id, wire.dump());
    json values;
    try {
      values = body.at("data").at(0).at("embedding");
    } catch (const json::exception& e) {
      fail(ErrorKind::GatewayError, "malformed embedding response from " + provider_id + ": " + e.what());
    }
    result = to_embedding(values, provider_id, expected);
    if (mode == GatewayMode::record) write_cache(key, canonical, {{"values", values}});
  }

  std::lock_guard lock(mutex_);
  return embed_memo_.emplace(key.digest, *result).first->second;
}

}  // namespace vlmh
