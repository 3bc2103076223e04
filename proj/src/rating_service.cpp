#include "vlmh/ratings.hpp"

// After Eigen: resolv.h defines a _res macro that collides with Eigen parameter names.
#include <httplib.h>

#include <fmt/format.h>

#include "vlmh/error.hpp"
#include "vlmh/util.hpp"

namespace vlmh {

namespace {

int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::UnknownRun:
    case ErrorKind::UnknownExplanation:
    case ErrorKind::EmptyInput: return 404;
    case ErrorKind::DuplicateRating: return 409;
    case ErrorKind::IoError: return 500;
    default: return 400;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const Error& e) { send_json(res, http_status(e.kind()), e.to_json()); }

std::string require_param(const httplib::Request& req, const char* name) {
  if (!req.has_param(name) || req.get_param_value(name).empty())
    fail(ErrorKind::PreconditionViolation, fmt::format("query parameter {} is required", name));
  return req.get_param_value(name);
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const Error& e) {
      send_error(res, e);
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", "Internal"}, {"message", e.what()}});
    }
  };
}

}  // namespace

struct RatingService::Impl {
  RunStore runs;
  RatingStore& ratings;
  httplib::Server server;

  Impl(RunStore r, RatingStore& s) : runs(std::move(r)), ratings(s) {}

  std::string image_url(const std::string& run_id, const std::string& part_id, std::size_t n) const {
    return fmt::format("/api/images/{}/{}?run_id={}", part_id, n, run_id);
  }

  void routes() {
    server.Get("/api/runs", guarded([this](const httplib::Request&, httplib::Response& res) {
      json arr = json::array();
      for (const auto& id : runs.list_runs()) {
        arr.push_back({{"run_id", id},
                       {"explanations", list_explanations(runs, id).size()},
                       {"ratings", ratings.for_run(id).size()}});
      }
      send_json(res, 200, arr);
    }));

    server.Get("/api/tasks", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto rater = require_param(req, "rater_id");
      const auto run_id = require_param(req, "run_id");
      json pending = json::array();
      for (const auto& item : list_pending(runs, ratings, rater, run_id)) {
        json images = json::array();
        for (auto n : item.image_indices) images.push_back(image_url(run_id, item.part_id, n));
        pending.push_back({{"explanation_id", item.explanation_id},
                           {"part_id", item.part_id},
                           {"text", item.text},
                           {"images", std::move(images)}});
      }
      send_json(res, 200, {{"run_id", run_id}, {"rater_id", rater}, {"total", pending.size()}, {"pending", pending}});
    }));

    server.Post("/api/ratings", guarded([this](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error& e) {
        fail(ErrorKind::ParseError, std::string("request body is not JSON: ") + e.what());
      }
      const auto id = ratings.submit(rating_record_from_json(body), runs);
      send_json(res, 201, {{"rating_id", id}});
    }));

    server.Get("/api/summary", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto run_id = require_param(req, "run_id");
      runs.require(run_id);
      const Phase phase = req.has_param("phase") ? phase_from_string(req.get_param_value("phase")) : Phase::before_iclhf;
      std::vector<RatingRecord> selected;
      for (auto& r : ratings.for_run(run_id))
        if (phase_of(r.explanation_id) == phase) selected.push_back(std::move(r));
      send_json(res, 200, to_json(summarize(selected, phase)));
    }));

    server.Get(R"(/api/images/([^/]+)/(\d+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string part_id = req.matches[1];
      const std::size_t n = std::stoul(req.matches[2]);
      std::vector<std::string> candidates;
      if (req.has_param("run_id")) candidates.push_back(req.get_param_value("run_id"));
      else candidates = runs.list_runs();
      for (const auto& run_id : candidates) {
        const auto images = part_images(runs, run_id, part_id);
        if (images.empty()) continue;
        if (n >= images.size()) break;
        res.status = 200;
        res.set_content(read_file(images[n].path),
                        images[n].media_type == MediaType::png ? "image/png" : "image/jpeg");
        return;
      }
      send_json(res, 404, {{"error", "NotFound"}, {"message", fmt::format("no image {} for part {}", n, part_id)}});
    }));

    server.Get("/api/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto run_id = require_param(req, "run_id");
      runs.require(run_id);
      std::string body;
      for (const auto& r : ratings.for_run(run_id)) body += to_json(r).dump() + "\n";
      res.status = 200;
      res.set_content(body, "application/x-ndjson");
    }));
  }
};

RatingService::RatingService(RunStore runs, RatingStore& ratings, std::optional<fs::path> static_dir)
    : impl_(std::make_unique<Impl>(std::move(runs), ratings)) {
  impl_->routes();
  if (static_dir && fs::is_directory(*static_dir)) impl_->server.set_mount_point("/", static_dir->string());
}

RatingService::~RatingService() { stop(); }

bool RatingService::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

int RatingService::bind_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }

bool RatingService::listen_after_bind() { return impl_->server.listen_after_bind(); }

void RatingService::stop() {
  if (impl_) impl_->server.stop();
}

void RatingService::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace vlmh
