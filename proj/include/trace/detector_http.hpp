#pragma once

// HTTP transport and server for the detector wire protocol (POST /detect,
// GET /info). Kept apart from detector.hpp so only users of HTTP pay for
// cpp-httplib.

#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "httplib.h"
#include "trace/detector.hpp"

namespace trace {

class HttpTransport : public Transport {
 public:
  HttpTransport(std::string base_url, int timeout_ms)
      : base_url_(std::move(base_url)), timeout_ms_(timeout_ms) {
    // /info is optional; endpoints without it are simply "unknown".
    try {
      auto cli = MakeClient();
      if (auto res = cli->Get("/info"); res && res->status == 200) {
        const auto j = nlohmann::json::parse(res->body, nullptr, false);
        if (j.is_object() && j.contains("deterministic") && j["deterministic"].is_boolean()) {
          deterministic_ = j["deterministic"].get<bool>();
        }
        if (j.is_object()) info_ = j;
      }
    } catch (...) {
    }
  }

  DetectionSet Detect(const ImageBuf& image, const std::string& id) override {
    auto cli = MakeClient();
    auto res = cli->Post("/detect", wire::EncodeRequest(id, image), "application/json");
    if (!res) throw TransportFailure("http: " + httplib::to_string(res.error()));
    if (res->status >= 500) {
      throw TransportFailure("http status " + std::to_string(res->status) + ": " +
                             wire::Excerpt(res->body));
    }
    if (res->status != 200) {
      throw Error(ErrorCode::kProtocolViolation,
                  "http status " + std::to_string(res->status) + ": " + wire::Excerpt(res->body));
    }
    return wire::ParseResponse(res->body, id);
  }

  std::optional<bool> Deterministic() const override { return deterministic_; }
  const nlohmann::json& info() const noexcept { return info_; }

 private:
  // One client per call keeps concurrent requests independent.
  std::unique_ptr<httplib::Client> MakeClient() const {
    auto cli = std::make_unique<httplib::Client>(base_url_);
    const time_t sec = timeout_ms_ / 1000;
    const time_t usec = (timeout_ms_ % 1000) * 1000;
    cli->set_connection_timeout(sec, usec);
    cli->set_read_timeout(sec, usec);
    cli->set_write_timeout(sec, usec);
    return cli;
  }

  std::string base_url_;
  int timeout_ms_;
  std::optional<bool> deterministic_;
  nlohmann::json info_ = nlohmann::json::object();
};

inline Detector MakeHttpDetector(DetectorEndpoint ep) {
  ep.kind = EndpointKind::kHttp;
  ep = WithEnvironmentOverrides(ep);
  return Detector(ep, std::make_shared<HttpTransport>(ep.address, ep.timeout_ms));
}

// Builds a Detector from an endpoint description, with `in_process` used for
// EndpointKind::kInProcess.
inline Detector MakeDetector(const DetectorEndpoint& ep, InProcessTransport::Fn in_process = {}) {
  switch (ep.kind) {
    case EndpointKind::kHttp: return MakeHttpDetector(ep);
    case EndpointKind::kSubprocess: return MakeSubprocessDetector(ep);
    case EndpointKind::kInProcess: break;
  }
  if (!in_process) throw Error(ErrorCode::kInvalidArgument, "no in-process detector available");
  return MakeInProcessDetector(std::move(in_process), ep);
}

/// Serves a detection function over HTTP.
class DetectorHttpServer {
 public:
  using Fn = std::function<DetectionSet(const ImageBuf&)>;

  DetectorHttpServer(Fn detect, nlohmann::json info) : detect_(std::move(detect)), info_(std::move(info)) {
    server_.Post("/detect", [this](const httplib::Request& req, httplib::Response& res) {
      wire::Request parsed;
      try {
        parsed = wire::ParseRequest(req.body);
      } catch (const Error& e) {
        res.status = 400;
        res.set_content(nlohmann::json{{"error", e.what()}, {"code", "protocol violation"}}.dump(),
                        "application/json");
        return;
      }
      try {
        res.set_content(wire::EncodeResponse(parsed.id, detect_(parsed.image)), "application/json");
      } catch (const std::exception& e) {
        res.status = 500;
        res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      }
    });
    server_.Get("/info", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(info_.dump(), "application/json");
    });
  }

  // Blocks until Stop().
  bool Listen(const std::string& host, int port) { return server_.listen(host, port); }

  // Binds an ephemeral port and returns it; call ListenAfterBind() next.
  int BindAnyPort(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool ListenAfterBind() { return server_.listen_after_bind(); }

  void Stop() { server_.stop(); }
  void WaitUntilReady() { server_.wait_until_ready(); }

 private:
  Fn detect_;
  nlohmann::json info_;
  httplib::Server server_;
};

}  // namespace trace
