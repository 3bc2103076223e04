#include "vlmh/gateway.hpp"

// After Eigen: resolv.h defines a _res macro that collides with Eigen parameter names.
#include <httplib.h>

namespace vlmh {

HttpResponse HttpTransport::post(const HttpRequest& request) {
  httplib::Client client(request.base_url);
  client.set_connection_timeout(std::chrono::seconds(10));
  client.set_read_timeout(read_timeout_);
  httplib::Headers headers;
  std::string content_type = "application/json";
  for (const auto& [k, v] : request.headers) {
    if (k == "Content-Type") content_type = v;
    else headers.emplace(k, v);
  }
  auto result = client.Post(request.path, headers, request.body, content_type);
  if (!result) return {0, {}, httplib::to_string(result.error())};
  return {result->status, result->body, {}};
}

}  // namespace vlmh
