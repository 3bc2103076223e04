#include <doctest.h>

#include <thread>

#include "support.hpp"
#include "vlmh/error.hpp"
#include "vlmh/gateway.hpp"

// After Eigen (via gateway.hpp): resolv.h defines _res.
#include <httplib.h>

using namespace vlmh;
using test::FakeTransport;
using test::TempDir;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected a vlmh::Error");
  return ErrorKind::IoError;
}

ImageRef fixture_image(const std::string& rel) {
  return {test::fixture_dir() / "images" / rel, rel.ends_with(".jpg") ? MediaType::jpeg : MediaType::png};
}

ChatRequest sample_request() {
  ChatRequest r;
  r.model_id = "m";
  r.user_text = "Describe the part.";
  r.images = {fixture_image("bracket-01/a_0.png"), fixture_image("bracket-01/c_1.jpg")};
  return r;
}

std::size_t count_files(const fs::path& dir) {
  if (!fs::exists(dir)) return 0;
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) ++n;
  return n;
}

}  // namespace

TEST_CASE("cache key ignores field order and image paths but not content") {
  const json a = {{"model_id", "m"}, {"user_text", "hi"}, {"temperature", 0.0}, {"max_output_tokens", 64},
                  {"images", {{{"path", (test::fixture_dir() / "images/flange-02/a_0.png").string()},
                               {"media_type", "png"}}}}};
  const json b = json::parse(R"({"images":[{"media_type":"png","path":")" +
                             (test::fixture_dir() / "images/flange-02/a_0.png").string() +
                             R"("}],"max_output_tokens":64,"temperature":0.0,"user_text":"hi","model_id":"m"})");
  const auto ka = cache_key(canonical_request(chat_request_from_json(a)));
  CHECK(ka == cache_key(canonical_request(chat_request_from_json(b))));
  CHECK(ka.digest.size() == 64);
  CHECK(ka.shard() == ka.digest.substr(0, 2));

  TempDir dir;
  fs::copy_file(test::fixture_dir() / "images/flange-02/a_0.png", dir / "renamed.png");
  auto moved = chat_request_from_json(a);
  moved.images[0].path = dir / "renamed.png";
  CHECK(cache_key(canonical_request(moved)) == ka);

  auto hotter = chat_request_from_json(a);
  hotter.temperature = 0.5;
  CHECK_FALSE(cache_key(canonical_request(hotter)) == ka);
  auto other_image = chat_request_from_json(a);
  other_image.images[0] = fixture_image("flange-02/a_1.png");
  CHECK_FALSE(cache_key(canonical_request(other_image)) == ka);
  CHECK_FALSE(cache_key(canonical_embedding_request("hi", "emb")) == ka);
}

TEST_CASE("wire body follows the chat-completions shape") {
  TempDir dir;
  auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return test::chat_reply("ok"); });
  Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
  auto req = sample_request();
  req.system_text = "Be brief.";
  req.temperature = 0.25;
  req.max_output_tokens = 77;
  gw.chat(req);
  REQUIRE(fake->calls() == 1);
  const auto sent = fake->requests()[0];
  CHECK(sent.path == "/v1/chat/completions");
  CHECK(sent.headers.at("Authorization") == "Bearer test-key");
  const auto body = json::parse(sent.body);
  CHECK(body["model"] == "m");
  CHECK(body["temperature"] == 0.25);
  CHECK(body["max_tokens"] == 77);
  REQUIRE(body["messages"].size() == 2);
  CHECK(body["messages"][0]["role"] == "system");
  const auto& content = body["messages"][1]["content"];
  REQUIRE(content.size() == 3);
  CHECK(content[0]["type"] == "text");
  CHECK(content[0]["text"] == "Describe the part.");
  const std::string png_url = content[1]["image_url"]["url"];
  const std::string jpg_url = content[2]["image_url"]["url"];
  CHECK(png_url.starts_with("data:image/png;base64,iVBORw0KGgo"));
  CHECK(jpg_url.starts_with("data:image/jpeg;base64,/9j/"));
}

TEST_CASE("record writes the cache and replay serves it offline") {
  TempDir dir;
  auto fake = std::make_shared<FakeTransport>(
      [](const HttpRequest&, std::size_t) { return test::chat_reply("An angle bracket."); });
  const auto req = sample_request();
  ChatResponse recorded;
  {
    Gateway gw(test::test_options(dir.path(), GatewayMode::record), fake);
    recorded = gw.chat(req);
    CHECK(recorded.text == "An angle bracket.");
    CHECK(recorded.usage.completion_tokens == 5);
    const auto key = cache_key(canonical_request(req));
    const auto file = dir.path() / key.shard() / (key.digest + ".json");
    REQUIRE(fs::exists(file));
    const auto entry = read_json_file(file);
    CHECK(entry["key"] == key.digest);
    CHECK(entry["request"] == canonical_request(req));
    // A second record-mode call is a cache hit.
    CHECK(gw.chat(req) == recorded);
    CHECK(fake->calls() == 1);
  }
  auto offline = std::make_shared<FakeTransport>();
  Gateway replay(test::test_options(dir.path(), GatewayMode::replay), offline);
  CHECK(replay.chat(req) == recorded);
  auto changed = req;
  changed.user_text = "Describe it differently.";
  CHECK(kind_of([&] { replay.chat(changed); }) == ErrorKind::ReplayMiss);
  CHECK(offline->calls() == 0);
}

TEST_CASE("live mode neither reads nor writes the cache") {
  TempDir dir;
  auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t i) {
    return test::chat_reply("reply " + std::to_string(i));
  });
  Gateway gw(test::test_options(dir / "cache", GatewayMode::live), fake);
  CHECK(gw.chat(sample_request()).text == "reply 0");
  CHECK(gw.chat(sample_request()).text == "reply 1");
  CHECK(count_files(dir / "cache") == 0);
  gw.set_mode(GatewayMode::record);
  CHECK(gw.mode() == GatewayMode::record);
  gw.chat(sample_request());
  CHECK(count_files(dir / "cache") == 1);
}

TEST_CASE("transient failures are retried with capped exponential backoff") {
  TempDir dir;
  std::vector<std::chrono::milliseconds> sleeps;
  SUBCASE("recovers after two 503s") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t i) {
      return i < 2 ? HttpResponse{503, "busy", ""} : test::chat_reply("fine");
    });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live, &sleeps), fake);
    CHECK(gw.chat(sample_request()).text == "fine");
    CHECK(fake->calls() == 3);
    REQUIRE(sleeps.size() == 2);
    CHECK(sleeps[0].count() >= 500);
    CHECK(sleeps[0].count() <= 1000);
    CHECK(sleeps[1].count() >= 1000);
    CHECK(sleeps[1].count() <= 2000);
  }
  SUBCASE("server errors exhaust into NetworkError") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return HttpResponse{500, "", ""}; });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live, &sleeps), fake);
    CHECK(kind_of([&] { gw.chat(sample_request()); }) == ErrorKind::NetworkError);
    CHECK(fake->calls() == 5);
    CHECK(sleeps.size() == 4);
  }
  SUBCASE("connection failures exhaust into NetworkError") {
    auto fake = std::make_shared<FakeTransport>();
    Gateway gw(test::test_options(dir.path(), GatewayMode::live, &sleeps), fake);
    CHECK(kind_of([&] { gw.chat(sample_request()); }) == ErrorKind::NetworkError);
    CHECK(fake->calls() == 5);
  }
  SUBCASE("persistent 429 surfaces RateLimited") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return HttpResponse{429, "", ""}; });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live, &sleeps), fake);
    CHECK(kind_of([&] { gw.chat(sample_request()); }) == ErrorKind::RateLimited);
    CHECK(fake->calls() == 5);
  }
  SUBCASE("backoff never exceeds the cap") {
    auto opts = test::test_options(dir.path(), GatewayMode::live, &sleeps);
    opts.retry.max_attempts = 10;
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return HttpResponse{502, "", ""}; });
    Gateway gw(opts, fake);
    CHECK(kind_of([&] { gw.chat(sample_request()); }) == ErrorKind::NetworkError);
    REQUIRE(sleeps.size() == 9);
    for (std::size_t i = 0; i < sleeps.size(); ++i) {
      const double base = std::min(32000.0, 1000.0 * std::pow(2.0, static_cast<double>(i)));
      CHECK(sleeps[i].count() <= 32000);
      CHECK(static_cast<double>(sleeps[i].count()) >= 0.5 * base - 1);
      CHECK(static_cast<double>(sleeps[i].count()) <= base);
    }
  }
}

TEST_CASE("auth problems are never retried") {
  TempDir dir;
  SUBCASE("401 from the server") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return HttpResponse{401, "", ""}; });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
    CHECK(kind_of([&] { gw.chat(sample_request()); }) == ErrorKind::AuthError);
    CHECK(fake->calls() == 1);
  }
  SUBCASE("credential variable unset") {
    auto opts = test::test_options(dir.path(), GatewayMode::live);
    std::string asked;
    opts.env_lookup = [&](const std::string& name) {
      asked = name;
      return std::optional<std::string>();
    };
    auto fake = std::make_shared<FakeTransport>();
    Gateway gw(opts, fake);
    try {
      gw.chat(sample_request());
      FAIL("expected AuthError");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::AuthError);
      CHECK(e.details()["env"] == "VLMHARNESS_API_KEY_M");
    }
    CHECK(asked == "VLMHARNESS_API_KEY_M");
    CHECK(fake->calls() == 0);
  }
  SUBCASE("other client errors fail fast") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return HttpResponse{400, "bad", ""}; });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
    CHECK(kind_of([&] { gw.chat(sample_request()); }) == ErrorKind::GatewayError);
    CHECK(fake->calls() == 1);
  }
}

TEST_CASE("credential env naming") {
  CHECK(default_credential_env("gpt-4o") == "VLMHARNESS_API_KEY_GPT_4O");
  CHECK(default_credential_env("claude-3.5") == "VLMHARNESS_API_KEY_CLAUDE_3_5");
}

TEST_CASE("response validation") {
  TempDir dir;
  SUBCASE("empty completion with stop is an error") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return test::chat_reply(""); });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
    CHECK(kind_of([&] { gw.chat(sample_request()); }) == ErrorKind::GatewayError);
  }
  SUBCASE("empty completion cut by length is allowed") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return test::chat_reply("", "length"); });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
    CHECK(gw.chat(sample_request()).finish_reason == FinishReason::length);
  }
  SUBCASE("content filter maps to filtered") {
    auto fake = std::make_shared<FakeTransport>(
        [](const HttpRequest&, std::size_t) { return test::chat_reply("", "content_filter"); });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
    CHECK(gw.chat(sample_request()).finish_reason == FinishReason::filtered);
  }
  SUBCASE("non-JSON body") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return HttpResponse{200, "<html>", ""}; });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
    CHECK(kind_of([&] { gw.chat(sample_request()); }) == ErrorKind::GatewayError);
  }
  SUBCASE("request preconditions") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return test::chat_reply("x"); });
    auto opts = test::test_options(dir.path(), GatewayMode::live);
    opts.models["small"] = test::endpoint("http://127.0.0.1:9");
    opts.models["small"].image_limit = 1;
    Gateway gw(opts, fake);
    auto empty = sample_request();
    empty.user_text = "";
    CHECK(kind_of([&] { gw.chat(empty); }) == ErrorKind::PreconditionViolation);
    auto many = sample_request();
    many.images.assign(17, fixture_image("bracket-01/a_0.png"));
    CHECK(kind_of([&] { gw.chat(many); }) == ErrorKind::TooManyImages);
    auto small = sample_request();
    small.model_id = "small";
    CHECK(gw.image_limit("small") == 1);
    CHECK(kind_of([&] { gw.chat(small); }) == ErrorKind::TooManyImages);
    auto unknown = sample_request();
    unknown.model_id = "nobody";
    CHECK(kind_of([&] { gw.chat(unknown); }) == ErrorKind::ConfigError);
    CHECK(fake->calls() == 0);
  }
}

TEST_CASE("embeddings") {
  TempDir dir;
  SUBCASE("values, memoization and replay") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest& r, std::size_t) {
      CHECK(r.path == "/v1/embeddings");
      CHECK(json::parse(r.body)["input"] == "a bracket");
      return test::embedding_reply({0.1, 0.2, 0.3});
    });
    Gateway gw(test::test_options(dir.path(), GatewayMode::record), fake);
    const auto v = gw.embed("a bracket", "emb");
    CHECK(v.dimension() == 3);
    CHECK(v.values[2] == doctest::Approx(0.3));
    CHECK(v.provider_id == "emb");
    gw.embed("a bracket", "emb");
    CHECK(fake->calls() == 1);

    auto offline = std::make_shared<FakeTransport>();
    Gateway replay(test::test_options(dir.path(), GatewayMode::replay), offline);
    CHECK(replay.embed("a bracket", "emb").values == v.values);
    CHECK(kind_of([&] { replay.embed("a flange", "emb"); }) == ErrorKind::ReplayMiss);
    CHECK(offline->calls() == 0);
  }
  SUBCASE("memoized in live mode too") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return test::embedding_reply({1, 0, 0}); });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
    gw.embed("x", "emb");
    gw.embed("x", "emb");
    CHECK(fake->calls() == 1);
  }
  SUBCASE("dimension mismatch") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return test::embedding_reply({1, 2}); });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
    CHECK(kind_of([&] { gw.embed("x", "emb"); }) == ErrorKind::DimensionMismatch);
  }
  SUBCASE("all-zero vector") {
    auto fake = std::make_shared<FakeTransport>([](const HttpRequest&, std::size_t) { return test::embedding_reply({0, 0, 0}); });
    Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
    CHECK(kind_of([&] { gw.embed("x", "emb"); }) == ErrorKind::DegenerateVector);
  }
  SUBCASE("empty text and unknown provider") {
    auto fake = std::make_shared<FakeTransport>();
    Gateway gw(test::test_options(dir.path(), GatewayMode::live), fake);
    CHECK(kind_of([&] { gw.embed("", "emb"); }) == ErrorKind::PreconditionViolation);
    CHECK(kind_of([&] { gw.embed("x", "other"); }) == ErrorKind::ConfigError);
  }
}

TEST_CASE("in-flight requests stay within the concurrency limit") {
  TempDir dir;
  std::atomic<int> in_flight{0};
  std::atomic<int> peak{0};
  auto fake = std::make_shared<FakeTransport>([&](const HttpRequest& r, std::size_t) {
    const int now = ++in_flight;
    int seen = peak.load();
    while (now > seen && !peak.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(15));
    --in_flight;
    return test::chat_reply("echo " + json::parse(r.body)["messages"][0]["content"][0]["text"].get<std::string>());
  });
  auto opts = test::test_options(dir.path(), GatewayMode::live);
  opts.concurrency_limit = 3;
  Gateway gw(opts, fake);
  std::vector<std::string> replies(24);
  for_each_bounded(replies.size(), 12, [&](std::size_t i) {
    auto req = sample_request();
    req.user_text = "item " + std::to_string(i);
    replies[i] = gw.chat(req).text;
  });
  CHECK(peak.load() <= 3);
  CHECK(peak.load() >= 2);
  for (std::size_t i = 0; i < replies.size(); ++i) CHECK(replies[i] == "echo item " + std::to_string(i));
}

TEST_CASE("HTTP transport talks to a real server") {
  httplib::Server server;
  std::string seen_auth;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    const auto body = json::parse(req.body);
    res.set_content(test::chat_reply("served " + body["model"].get<std::string>()).body, "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  TempDir dir;
  auto opts = test::test_options(dir.path(), GatewayMode::live);
  opts.models["m"].base_url = "http://127.0.0.1:" + std::to_string(port);
  Gateway gw(opts, std::make_shared<HttpTransport>(std::chrono::seconds(5)));
  CHECK(gw.chat(sample_request()).text == "served m");
  CHECK(seen_auth == "Bearer test-key");
  server.stop();
  t.join();

  HttpTransport transport(std::chrono::seconds(1));
  const auto refused = transport.post({"http://127.0.0.1:" + std::to_string(port), "/x", {}, "{}"});
  CHECK(refused.status == 0);
  CHECK_FALSE(refused.error.empty());
}
