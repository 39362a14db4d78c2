#include <gtest/gtest.h>

#include <cstdlib>
#include <thread>

#include "trace/detector.hpp"
#include "trace/detector_http.hpp"
#include "trace/simdet.hpp"

using namespace trace;

namespace {

ImageBuf OneObjectScene() {
  sim::SceneSpec s;
  s.background_hue_deg = 30;
  s.objects = {{0, sim::kPersonClass, {40, 40, 100, 100}}};
  return sim::Render(s).image;
}

Detector SimInProcess() {
  auto det = std::make_shared<sim::SimDetector>();
  return MakeInProcessDetector([det](const ImageBuf& img) { return det->Detect(img); });
}

// Serves a fixed body, or a given status, on a background thread.
struct StubServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;

  explicit StubServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server.Post("/detect", handler);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~StubServer() {
    server.stop();
    thread.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

std::string IdOf(const std::string& body) { return nlohmann::json::parse(body).at("id").get<std::string>(); }

class FlakyTransport : public Transport {
 public:
  explicit FlakyTransport(int failures) : failures_(failures) {}
  DetectionSet Detect(const ImageBuf&, const std::string&) override {
    ++calls;
    if (failures_-- > 0) throw TransportFailure("simulated drop");
    return {};
  }
  int calls = 0;

 private:
  int failures_;
};

}  // namespace

TEST(Wire, RequestRoundTrip) {
  const auto img = OneObjectScene();
  const auto req = wire::ParseRequest(wire::EncodeRequest("abc", img));
  EXPECT_EQ(req.id, "abc");
  EXPECT_EQ(req.image, img);
}

TEST(Wire, ResponseRoundTrip) {
  DetectionSet set;
  set.detections.push_back({{1, 2, 30, 40}, 3, 0.91, "boat"});
  const auto back = wire::ParseResponse(wire::EncodeResponse("q1", set), "q1");
  ASSERT_EQ(back.detections.size(), 1u);
  EXPECT_EQ(back.detections[0].bbox, (BBox{1, 2, 30, 40}));
  EXPECT_EQ(back.detections[0].class_name, "boat");
  EXPECT_EQ(back.detections[0].confidence, 0.91);
}

TEST(Wire, Violations) {
  auto expect_violation = [](const std::string& body) {
    try {
      wire::ParseResponse(body, "q");
      ADD_FAILURE() << body;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kProtocolViolation) << body;
    }
  };
  expect_violation("not json");
  expect_violation(R"({"detections": []})");
  expect_violation(R"({"id": "other", "detections": []})");
  expect_violation(R"({"id": "q", "detections": {}})");
  expect_violation(R"({"id": "q", "detections": [{"bbox": [0,0,1], "class_id": 1, "confidence": 0.5}]})");
  expect_violation(R"({"id": "q", "detections": [{"bbox": [0,0,1,1], "class_id": 1, "confidence": 1.5}]})");
  expect_violation(R"({"id": "q", "detections": [{"bbox": [5,0,1,1], "class_id": 1, "confidence": 0.5}]})");
  expect_violation(R"({"id": "q", "detections": [{"bbox": [0,0,1,1], "class_id": "x", "confidence": 0.5}]})");
  try {
    wire::ParseResponse(std::string(500, 'x'), "q");
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("xxxx..."), std::string::npos);  // excerpt, truncated
  }
}

TEST(Detect, BlankImageEmpty) { EXPECT_TRUE(SimInProcess().Detect(ImageBuf(64, 64)).detections.empty()); }

TEST(Detect, OneCleanObject) {
  const auto dets = SimInProcess().Detect(OneObjectScene()).detections;
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].class_id, sim::kPersonClass);
  EXPECT_GE(dets[0].confidence, 0.5);
  EXPECT_LE(dets[0].confidence, 1.0);
}

TEST(Detect, LedgerCountsPerPhase) {
  const auto det = SimInProcess();
  QueryLedger ledger;
  det.Detect(ImageBuf(8, 8), &ledger, Phase::kBaseline);
  std::vector<ImageBuf> batch(5, ImageBuf(8, 8));
  det.DetectBatch(batch, 2, &ledger, Phase::kCtc);
  det.DetectBatch(batch, 1, &ledger, Phase::kFtc);
  EXPECT_EQ(ledger.count(Phase::kBaseline), 1);
  EXPECT_EQ(ledger.count(Phase::kCtc), 5);
  EXPECT_EQ(ledger.count(Phase::kFtc), 5);
  EXPECT_EQ(ledger.total(), 11);
  EXPECT_EQ(ledger.ToJson()["total"], 11);
}

TEST(Detect, RetriesThenSucceeds) {
  auto flaky = std::make_shared<FlakyTransport>(2);
  DetectorEndpoint ep;
  ep.max_retries = 2;
  Detector det(ep, flaky);
  QueryLedger ledger;
  EXPECT_NO_THROW(det.Detect(ImageBuf(4, 4), &ledger));
  EXPECT_EQ(flaky->calls, 3);
  EXPECT_EQ(ledger.total(), 1);  // one logical query
}

TEST(Detect, UnavailableAfterRetries) {
  DetectorEndpoint ep;
  ep.max_retries = 1;
  Detector det(ep, std::make_shared<FlakyTransport>(5));
  try {
    det.Detect(ImageBuf(4, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDetectorUnavailable);
  }
}

TEST(Endpoint, Validation) {
  DetectorEndpoint ep;
  ep.timeout_ms = 0;
  EXPECT_THROW(ep.Validate(), Error);
  ep.timeout_ms = 5;
  ep.max_retries = -1;
  EXPECT_THROW(ep.Validate(), Error);
}

TEST(Endpoint, TimeoutEnvironmentOverride) {
  ::setenv("TRACE_DETECTOR_TIMEOUT_MS", "1234", 1);
  EXPECT_EQ(WithEnvironmentOverrides({}).timeout_ms, 1234);
  ::setenv("TRACE_DETECTOR_TIMEOUT_MS", "garbage", 1);
  EXPECT_EQ(WithEnvironmentOverrides({}).timeout_ms, 10000);
  ::unsetenv("TRACE_DETECTOR_TIMEOUT_MS");
}

TEST(Batch, SingleEqualsDetect) {
  const auto det = SimInProcess();
  const std::vector<ImageBuf> one{OneObjectScene()};
  EXPECT_EQ(wire::EncodeResponse("x", det.DetectBatch(one)[0]), wire::EncodeResponse("x", det.Detect(one[0])));
}

TEST(Batch, IdenticalImagesIdenticalAnswers) {
  const auto det = SimInProcess();
  const std::vector<ImageBuf> batch(6, OneObjectScene());
  const auto out = det.DetectBatch(batch, 3);
  for (const auto& o : out) EXPECT_EQ(wire::EncodeResponse("x", o), wire::EncodeResponse("x", out[0]));
}

TEST(Batch, ParallelismDoesNotChangeResults) {
  const auto det = SimInProcess();
  std::vector<ImageBuf> batch;
  for (int i = 0; i < 16; ++i) {
    sim::SceneSpec s;
    s.background_hue_deg = i * 20.0;
    s.objects = {{0, i % 5, {10.0 + i, 20, 70.0 + i, 80}}};
    batch.push_back(sim::Render(s).image);
  }
  const auto a = det.DetectBatch(batch, 1), b = det.DetectBatch(batch, 8);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(wire::EncodeResponse("x", a[i]), wire::EncodeResponse("x", b[i]));
}

TEST(Batch, FailureNamesIndex) {
  Detector det = MakeInProcessDetector([](const ImageBuf& img) -> DetectionSet {
    if (img.width() == 3) throw Error(ErrorCode::kProtocolViolation, "bad");
    return {};
  });
  std::vector<ImageBuf> batch{ImageBuf(2, 2), ImageBuf(2, 2), ImageBuf(3, 3), ImageBuf(2, 2)};
  EXPECT_THROW(det.DetectBatch(batch, 1), Error);
  try {
    det.DetectBatch(batch, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("batch element 2"), std::string::npos);
  }
  EXPECT_THROW(det.DetectBatch(batch, 0), Error);
}

TEST(Http, StubGoldenBody) {
  StubServer stub([](const httplib::Request& req, httplib::Response& res) {
    const std::string body = R"({"id": ")" + IdOf(req.body) +
                             R"(", "detections": [{"bbox": [10, 20, 30.5, 40], "class_id": 2, "class_name": "potted_plant", "confidence": 0.875}]})";
    res.set_content(body, "application/json");
  });
  DetectorEndpoint ep;
  ep.address = stub.url();
  const auto dets = MakeHttpDetector(ep).Detect(ImageBuf(16, 16)).detections;
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].bbox, (BBox{10, 20, 30.5, 40}));
  EXPECT_EQ(dets[0].class_id, 2);
  EXPECT_EQ(dets[0].class_name, "potted_plant");
  EXPECT_EQ(dets[0].confidence, 0.875);
}

TEST(Http, MalformedIsProtocolViolation) {
  StubServer stub([](const httplib::Request&, httplib::Response& res) { res.set_content("{\"oops\": 1}", "application/json"); });
  DetectorEndpoint ep;
  ep.address = stub.url();
  try {
    MakeHttpDetector(ep).Detect(ImageBuf(4, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kProtocolViolation);
    EXPECT_NE(std::string(e.what()).find("oops"), std::string::npos);
  }
}

TEST(Http, ServerErrorsAreRetried) {
  std::atomic<int> calls{0};
  StubServer stub([&](const httplib::Request& req, httplib::Response& res) {
    if (calls++ == 0) {
      res.status = 503;
      return;
    }
    res.set_content(R"({"id": ")" + IdOf(req.body) + R"(", "detections": []})", "application/json");
  });
  DetectorEndpoint ep;
  ep.address = stub.url();
  EXPECT_TRUE(MakeHttpDetector(ep).Detect(ImageBuf(4, 4)).detections.empty());
  EXPECT_EQ(calls.load(), 2);
}

TEST(Http, DeadEndpointUnavailable) {
  DetectorEndpoint ep;
  ep.address = "http://127.0.0.1:1";
  ep.timeout_ms = 200;
  ep.max_retries = 1;
  try {
    MakeHttpDetector(ep).Detect(ImageBuf(4, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDetectorUnavailable);
  }
}

TEST(Http, SimdetServerMatchesInProcess) {
  sim::SimDetector sd;
  nlohmann::json info = {{"model", "simdet"}, {"classes", nlohmann::json::array()}, {"deterministic", true}};
  DetectorHttpServer server([&](const ImageBuf& img) { return sd.Detect(img); }, info);
  const int port = server.BindAnyPort();
  std::thread t([&] { server.ListenAfterBind(); });
  server.WaitUntilReady();
  DetectorEndpoint ep;
  ep.address = "http://127.0.0.1:" + std::to_string(port);
  const auto det = MakeHttpDetector(ep);
  EXPECT_EQ(det.deterministic(), std::optional<bool>(true));
  const auto img = OneObjectScene();
  std::vector<ImageBuf> batch(4, img);
  const auto remote = det.DetectBatch(batch, 4);
  for (const auto& r : remote) EXPECT_EQ(wire::EncodeResponse("x", r), wire::EncodeResponse("x", sd.Detect(img)));
  httplib::Client cli(ep.address);
  auto bad = cli.Post("/detect", "{}", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  server.Stop();
  t.join();
}

TEST(Subprocess, SimdetStdio) {
  DetectorEndpoint ep;
  ep.address = std::string(SIMDET_BIN) + " stdio";
  const auto det = MakeSubprocessDetector(ep);
  const auto img = OneObjectScene();
  const auto expect = wire::EncodeResponse("x", sim::SimDetector().Detect(img));
  std::vector<ImageBuf> batch(5, img);
  for (const auto& r : det.DetectBatch(batch, 3)) EXPECT_EQ(wire::EncodeResponse("x", r), expect);
}

TEST(Subprocess, DeadChildUnavailable) {
  DetectorEndpoint ep;
  ep.address = "exit 0";
  ep.max_retries = 1;
  try {
    MakeSubprocessDetector(ep).Detect(ImageBuf(4, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDetectorUnavailable);
  }
}

TEST(Subprocess, Timeout) {
  DetectorEndpoint ep;
  ep.address = "sleep 5";
  ep.timeout_ms = 100;
  ep.max_retries = 0;
  EXPECT_THROW(MakeSubprocessDetector(ep).Detect(ImageBuf(4, 4)), Error);
}
