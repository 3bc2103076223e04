#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "vlmh/corpus.hpp"

namespace vlmh {

enum class GatewayMode { live, record, replay };

std::string to_string(GatewayMode mode);
GatewayMode gateway_mode_from_string(const std::string& name);

inline constexpr std::size_t kMaxImagesPerRequest = 16;

struct ChatRequest {
  std::string model_id;
  std::optional<std::string> system_text;
  std::string user_text;
  std::vector<ImageRef> images;
  double temperature = 0.0;
  int max_output_tokens = 1024;
};

/// Inverse of the "request" field stored in cache entries, minus image bytes:
/// images are given as {"path","media_type"} objects.
ChatRequest chat_request_from_json(const nlohmann::json& j);

enum class FinishReason { stop, length, filtered, error };

std::string to_string(FinishReason reason);
FinishReason finish_reason_from_string(const std::string& name);

struct Usage {
  int prompt_tokens = 0;
  int completion_tokens = 0;

  bool operator==(const Usage&) const = default;
};

struct ChatResponse {
  std::string text;
  std::string model_id;
  FinishReason finish_reason = FinishReason::stop;
  Usage usage;

  bool operator==(const ChatResponse&) const = default;
};

nlohmann::json to_json(const ChatResponse& response);
ChatResponse chat_response_from_json(const nlohmann::json& j);

struct EmbeddingVector {
  Eigen::VectorXd values;
  std::string provider_id;

  Eigen::Index dimension() const noexcept { return values.size(); }
};

struct CacheKey {
  std::string digest;  // 64 lowercase hex chars

  std::string shard() const { return digest.substr(0, 2); }
  bool operator==(const CacheKey&) const = default;
};

/// Canonical form of a chat request. nlohmann::json objects keep keys sorted,
/// so the dump is independent of the order fields were set in. Image bytes
/// enter through their SHA-256, never their paths.
nlohmann::json canonical_request(const ChatRequest& request);
nlohmann::json canonical_embedding_request(const std::string& text, const std::string& provider_id);
CacheKey cache_key(const nlohmann::json& canonical);

struct HttpRequest {
  std::string base_url;
  std::string path;
  std::map<std::string, std::string> headers;
  std::string body;
};

struct HttpResponse {
  int status = 0;  // 0 = no HTTP exchange happened (connect/read failure)
  std::string body;
  std::string error;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const HttpRequest& request) = 0;
};

/// cpp-httplib client; supports http:// and https:// base URLs.
class HttpTransport final : public Transport {
 public:
  explicit HttpTransport(std::chrono::seconds read_timeout = std::chrono::seconds(120))
      : read_timeout_(read_timeout) {}
  HttpResponse post(const HttpRequest& request) override;

 private:
  std::chrono::seconds read_timeout_;
};

struct EndpointConfig {
  std::string base_url;
  std::string path = "/v1/chat/completions";
  std::string credential_env;  // empty = VLMHARNESS_API_KEY_<MODEL_ID>
  std::string credential_header = "Authorization";
  std::string credential_prefix = "Bearer ";
  std::size_t image_limit = kMaxImagesPerRequest;
};

struct EmbeddingProviderConfig {
  EndpointConfig endpoint;
  std::string model;  // remote model name; empty = provider id
  Eigen::Index dimension = 0;
};

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds initial_backoff{1000};
  std::chrono::milliseconds max_backoff{32000};
};

/// Default credential variable for a model id: upper-cased, every
/// non-alphanumeric character replaced by '_'.
std::string default_credential_env(const std::string& model_id);

struct GatewayOptions {
  std::map<std::string, EndpointConfig> models;
  std::map<std::string, EmbeddingProviderConfig> embedders;
  std::filesystem::path cache_dir = "cache";
  GatewayMode mode = GatewayMode::replay;
  std::size_t concurrency_limit = 4;
  RetryPolicy retry;
  std::function<void(std::chrono::milliseconds)> sleeper;  // default: this_thread::sleep_for
  std::function<std::optional<std::string>(const std::string&)> env_lookup;  // default: getenv
};

/// Uniform client for chat, embedding and judge calls.
///
/// Modes:
///   live    every call goes to the network; nothing is read from or written
///           to the cache directory.
///   record  a cached entry is returned when present, otherwise the network
///           response is persisted under cache/<shard>/<digest>.json.
///   replay  only the cache is consulted; a miss raises ReplayMiss and the
///           transport is never touched.
/// Embeddings are additionally memoized for the lifetime of the Gateway.
class Gateway {
 public:
  Gateway(GatewayOptions options, std::shared_ptr<Transport> transport);

  ChatResponse chat(const ChatRequest& request);
  EmbeddingVector embed(const std::string& text, const std::string& provider_id);

  void set_mode(GatewayMode mode);
  GatewayMode mode() const;

  /// Image cap for a model: its configured limit, else kMaxImagesPerRequest.
  std::size_t image_limit(const std::string& model_id) const;

  std::filesystem::path cache_path(const CacheKey& key) const;

 private:
  std::optional<nlohmann::json> read_cache(const CacheKey& key) const;
  void write_cache(const CacheKey& key, const nlohmann::json& canonical, const nlohmann::json& response);
  nlohmann::json send_with_retries(const EndpointConfig& endpoint, const std::string& credential_name,
                                   const std::string& body);
  std::string credential(const EndpointConfig& endpoint, const std::string& id) const;

  GatewayOptions options_;
  std::shared_ptr<Transport> transport_;
  mutable std::mutex mutex_;
  GatewayMode mode_;
  std::counting_semaphore<1024> slots_;
  std::unordered_map<std::string, EmbeddingVector> embed_memo_;
};

}  // namespace vlmh
