// simdet: the simulated detector behind the wire protocol.
//
//   simdet serve --port 8080 [--host 127.0.0.1] [--model model.json]
//   simdet stdio [--model model.json]
//   simdet render --scene scene.json --out image.png [--model model.json]

#include <csignal>
#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "trace/detector.hpp"
#include "trace/detector_http.hpp"
#include "trace/image_io.hpp"
#include "trace/simdet.hpp"

namespace {

trace::sim::SimModel LoadModel(const std::string& path) {
  if (path.empty()) return trace::sim::DefaultModel();
  return trace::sim::ModelFromJson(nlohmann::json::parse(trace::ReadFileText(path)));
}

nlohmann::json Info(const trace::sim::SimModel& m) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : m.classes) classes.push_back({{"id", c.id}, {"name", c.name}});
  return {{"model", "simdet"}, {"classes", classes}, {"deterministic", true}};
}

trace::DetectorHttpServer* g_server = nullptr;

void OnSignal(int) {
  if (g_server) g_server->Stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulated backdoored object detector"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string model_path;
  app.add_option("--model", model_path, "simulator model JSON (default: built-in, no backdoors)");

  auto* serve = app.add_subcommand("serve", "serve POST /detect and GET /info over HTTP");
  int port = 8080;
  std::string host = "127.0.0.1";
  serve->add_option("--port", port, "TCP port (0 picks a free one)");
  serve->add_option("--host", host, "bind address");

  auto* stdio = app.add_subcommand("stdio", "one JSON request per stdin line, one response per stdout line");

  auto* render = app.add_subcommand("render", "render a scene spec to PNG");
  std::string scene_path, out_path;
  render->add_option("--scene", scene_path)->required();
  render->add_option("--out", out_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  try {
    const auto model = LoadModel(model_path);
    const trace::sim::SimDetector det(model);
    auto detect = [&det](const trace::ImageBuf& img) { return det.Detect(img); };

    if (*serve) {
      trace::DetectorHttpServer server(detect, Info(model));
      g_server = &server;
      std::signal(SIGINT, OnSignal);
      std::signal(SIGTERM, OnSignal);
      const int bound = port == 0 ? server.BindAnyPort(host) : port;
      if (port != 0) {
        std::printf("listening on %s:%d\n", host.c_str(), bound);
        std::fflush(stdout);
        if (!server.Listen(host, port)) throw trace::Error(trace::ErrorCode::kIo, "cannot listen");
      } else {
        if (bound < 0) throw trace::Error(trace::ErrorCode::kIo, "cannot bind");
        std::printf("listening on %s:%d\n", host.c_str(), bound);
        std::fflush(stdout);
        server.ListenAfterBind();
      }
      return 0;
    }
    if (*stdio) {
      trace::ServeStdio(detect);
      return 0;
    }
    if (*render) {
      const auto spec = trace::sim::SceneFromJson(nlohmann::json::parse(trace::ReadFileText(scene_path)));
      trace::SavePng(out_path, trace::sim::Render(spec, model).image);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "simdet: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
