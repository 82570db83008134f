#include "i3d/io.hpp"
#include "i3d/service.hpp"

#include <httplib.h>

namespace i3d::service {

struct HttpServer::Impl {
  explicit Impl(Service& s) : service(s) {}
  Service& service;
  httplib::Server server;
};

namespace {

void send_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(nlohmann::json{{"error", message}, {"status", status}}.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    send_error(res, e.status, e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

/// Multipart uploads carry the PNG as a file field and points as a JSON string.
std::string json_body(const httplib::Request& req) {
  if (!req.is_multipart_form_data()) return req.body;
  nlohmann::json body = nlohmann::json::object();
  if (req.has_file("image")) body["image"] = base64_encode(req.get_file_value("image").content);
  for (const char* field : {"points", "point", "parameters"})
    if (req.has_file(field)) {
      try {
        body[field] = nlohmann::json::parse(req.get_file_value(field).content);
      } catch (const nlohmann::json::parse_error&) {
        throw ServiceError(400, std::string("multipart field \"") + field + "\" is not JSON");
      }
    }
  if (req.has_file("include_depth")) body["include_depth"] = req.get_file_value("include_depth").content == "true";
  return body.dump();
}

}  // namespace

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {
  auto& svc = impl_->service;
  auto& srv = impl_->server;
  srv.set_payload_max_length(svc.limits().max_body_bytes);
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.Get("/health", [&svc](const httplib::Request&, httplib::Response& res) {
    res.set_content(svc.health().dump(), "application/json");
  });
  srv.Post("/predict", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { res.set_content(svc.predict(json_body(req)), "application/json"); });
  });
  srv.Post("/render", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { res.set_content(svc.render(json_body(req)).dump(), "application/json"); });
  });
  srv.Get(R"(/render/([0-9a-f]{64})/(\d+)\.png)", [&svc](const httplib::Request& req, httplib::Response& res) {
    const auto png = svc.frame_png(req.matches[1], std::stoi(req.matches[2]));
    if (!png) return send_error(res, 404, "unknown frame");
    res.set_content(*png, "image/png");
  });
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace i3d::service
