#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vlmh/config.hpp"
#include "vlmh/corpus.hpp"
#include "vlmh/experiment.hpp"
#include "vlmh/gateway.hpp"
#include "vlmh/paraphrase.hpp"
#include "vlmh/util.hpp"

#ifndef VLMH_FIXTURE_DIR
#error "VLMH_FIXTURE_DIR must point at the fixtures directory"
#endif

namespace vlmh::test {

inline std::filesystem::path fixture_dir() { return VLMH_FIXTURE_DIR; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<unsigned> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("vlmh-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

/// Copies the shipped fixtures into a scratch workspace so runs never touch
/// the source tree.
inline void copy_fixtures(const std::filesystem::path& to) {
  std::filesystem::copy(fixture_dir(), to, std::filesystem::copy_options::recursive);
}

/// Scripted transport: `handler` builds each response; every call is logged.
class FakeTransport final : public Transport {
 public:
  using Handler = std::function<HttpResponse(const HttpRequest&, std::size_t call_index)>;

  explicit FakeTransport(Handler handler = nullptr) : handler_(std::move(handler)) {}

  HttpResponse post(const HttpRequest& request) override {
    std::size_t index;
    {
      std::lock_guard lock(mutex_);
      index = requests_.size();
      requests_.push_back(request);
    }
    if (!handler_) return {0, "", "network disabled in tests"};
    return handler_(request, index);
  }

  std::size_t calls() const {
    std::lock_guard lock(mutex_);
    return requests_.size();
  }
  std::vector<HttpRequest> requests() const {
    std::lock_guard lock(mutex_);
    return requests_;
  }

 private:
  Handler handler_;
  mutable std::mutex mutex_;
  std::vector<HttpRequest> requests_;
};

inline HttpResponse chat_reply(const std::string& text, const std::string& finish = "stop") {
  nlohmann::json body = {{"model", "fake"},
                         {"choices", nlohmann::json::array({{{"message", {{"role", "assistant"}, {"content", text}}},
                                                              {"finish_reason", finish}}})},
                         {"usage", {{"prompt_tokens", 3}, {"completion_tokens", 5}}}};
  return {200, body.dump(), ""};
}

inline HttpResponse embedding_reply(const std::vector<double>& values) {
  nlohmann::json body = {{"data", nlohmann::json::array({{{"embedding", values}}})}};
  return {200, body.dump(), ""};
}

inline EndpointConfig endpoint(const std::string& base_url, const std::string& path = "/v1/chat/completions") {
  EndpointConfig e;
  e.base_url = base_url;
  e.path = path;
  return e;
}

/// Options with one chat model, one embedder and a credential that always
/// resolves; sleeps are recorded instead of taken.
inline GatewayOptions test_options(const std::filesystem::path& cache_dir, GatewayMode mode,
                                   std::vector<std::chrono::milliseconds>* sleeps = nullptr) {
  GatewayOptions o;
  o.models["m"] = endpoint("http://127.0.0.1:9");
  o.models["judge"] = endpoint("http://127.0.0.1:9");
  EmbeddingProviderConfig e;
  e.endpoint = endpoint("http://127.0.0.1:9", "/v1/embeddings");
  e.dimension = 3;
  o.embedders["emb"] = e;
  o.cache_dir = cache_dir;
  o.mode = mode;
  o.sleeper = [sleeps](std::chrono::milliseconds d) {
    if (sleeps) sleeps->push_back(d);
  };
  o.env_lookup = [](const std::string&) { return std::optional<std::string>("test-key"); };
  return o;
}

/// A private copy of the fixtures with its config, store and a replay gateway
/// whose transport refuses every call.
struct Workspace {
  TempDir dir;
  HarnessConfig config;
  std::shared_ptr<FakeTransport> transport;
  std::unique_ptr<Gateway> gateway;

  explicit Workspace(FakeTransport::Handler handler = nullptr,
                     std::optional<GatewayMode> mode = std::nullopt) {
    copy_fixtures(dir.path() / "ws");
    config = load_config(root() / "harness.json");
    if (mode) config.gateway_mode = *mode;
    transport = std::make_shared<FakeTransport>(std::move(handler));
    GatewayOptions options = config.gateway_options();
    options.sleeper = [](std::chrono::milliseconds) {};
    options.env_lookup = [](const std::string&) { return std::optional<std::string>("test-key"); };
    gateway = std::make_unique<Gateway>(options, transport);
  }

  std::filesystem::path root() const { return dir.path() / "ws"; }
  RunStore store() const { return RunStore(config.runs_dir); }
  Manifest manifest() const { return load_manifest(config.manifest); }
  PromptSet prompts() const { return load_prompt_set(config.prompt_set_path()); }

  CollectOptions collect_options(const std::string& run_id) const {
    CollectOptions o;
    o.run_id = run_id;
    o.model_id = config.vlm_model_id;
    o.temperature = config.temperature;
    o.max_output_tokens = config.max_output_tokens;
    o.concurrency = config.concurrency_limit;
    return o;
  }
  ScoreOptions score_options() const {
    return {config.judge_model_id, config.embedding_provider_id, config.concurrency_limit};
  }
};

}  // namespace vlmh::test
