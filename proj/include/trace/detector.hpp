#pragma once

// Black-box detector access. TRACE only ever observes the model through
// Detector::Detect, which speaks one JSON message per query:
//
//   request  {"id": "...", "image_png_b64": "..."}
//   response {"id": "...", "detections": [{"bbox": [x1,y1,x2,y2],
//             "class_id": 3, "class_name": "boat", "confidence": 0.91}]}
//
// carried over HTTP POST /detect or as newline-delimited JSON on a child
// process's stdio. In-process endpoints skip the encoding entirely.

#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "trace/core.hpp"
#include "trace/image_io.hpp"

namespace trace {

enum class EndpointKind { kInProcess, kSubprocess, kHttp };

struct DetectorEndpoint {
  EndpointKind kind = EndpointKind::kInProcess;
  std::string address;  // command line (subprocess) or base URL (http)
  int timeout_ms = 10000;
  int max_retries = 2;

  void Validate() const {
    if (timeout_ms <= 0) throw Error(ErrorCode::kInvalidArgument, "timeout must be > 0");
    if (max_retries < 0) throw Error(ErrorCode::kInvalidArgument, "retries must be >= 0");
  }
};

// Applies TRACE_DETECTOR_TIMEOUT_MS when set.
inline DetectorEndpoint WithEnvironmentOverrides(DetectorEndpoint ep) {
  if (const char* env = std::getenv("TRACE_DETECTOR_TIMEOUT_MS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) ep.timeout_ms = static_cast<int>(v);
  }
  return ep;
}

enum class Phase { kBaseline = 0, kCtc = 1, kFtc = 2 };

inline const char* ToString(Phase p) {
  switch (p) {
    case Phase::kBaseline: return "baseline";
    case Phase::kCtc: return "ctc";
    case Phase::kFtc: return "ftc";
  }
  return "?";
}

/// Counts issued queries per phase; safe to update from any thread.
class QueryLedger {
 public:
  QueryLedger() = default;
  QueryLedger(const QueryLedger& o) { *this = o; }
  QueryLedger& operator=(const QueryLedger& o) {
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i].store(o.counts_[i].load());
    return *this;
  }

  void Record(Phase p, long n = 1) { counts_[static_cast<std::size_t>(p)].fetch_add(n); }
  long count(Phase p) const { return counts_[static_cast<std::size_t>(p)].load(); }
  long total() const {
    long t = 0;
    for (const auto& c : counts_) t += c.load();
    return t;
  }

  nlohmann::json ToJson() const {
    return {{"total", total()},
            {"baseline", count(Phase::kBaseline)},
            {"ctc", count(Phase::kCtc)},
            {"ftc", count(Phase::kFtc)}};
  }

 private:
  std::array<std::atomic<long>, 3> counts_{};
};

// ---------------------------------------------------------------------------
// Wire format

namespace wire {

inline std::string EncodeRequest(const std::string& id, const ImageBuf& image) {
  nlohmann::json j = {{"id", id}, {"image_png_b64", Base64Encode(EncodePng(image))}};
  return j.dump();
}

struct Request {
  std::string id;
  ImageBuf image;
};

inline std::string Excerpt(std::string_view s, std::size_t n = 160) {
  return std::string(s.substr(0, n)) + (s.size() > n ? "..." : "");
}

inline Request ParseRequest(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kProtocolViolation, "request is not JSON: " + Excerpt(text));
  }
  if (!j.is_object() || !j.contains("id") || !j["id"].is_string() ||
      !j.contains("image_png_b64") || !j["image_png_b64"].is_string()) {
    throw Error(ErrorCode::kProtocolViolation, "request fields: " + Excerpt(text));
  }
  Request r;
  r.id = j["id"].get<std::string>();
  try {
    r.image = DecodePng(Base64Decode(j["image_png_b64"].get<std::string>()));
  } catch (const Error& e) {
    throw Error(ErrorCode::kProtocolViolation, std::string("image payload: ") + e.what());
  }
  return r;
}

inline nlohmann::json DetectionsToJson(const DetectionSet& set) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : set.detections) {
    arr.push_back({{"bbox", {d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2}},
                   {"class_id", d.class_id},
                   {"class_name", d.class_name},
                   {"confidence", d.confidence}});
  }
  return arr;
}

inline std::string EncodeResponse(const std::string& id, const DetectionSet& set) {
  nlohmann::json j = {{"id", id}, {"detections", DetectionsToJson(set)}};
  return j.dump();
}

inline DetectionSet DetectionsFromJson(const nlohmann::json& arr, std::string_view raw) {
  if (!arr.is_array()) throw Error(ErrorCode::kProtocolViolation, "detections not a list: " + Excerpt(raw));
  DetectionSet out;
  for (const auto& d : arr) {
    const bool ok = d.is_object() && d.contains("bbox") && d["bbox"].is_array() &&
                    d["bbox"].size() == 4 && d.contains("class_id") &&
                    d["class_id"].is_number_integer() && d.contains("confidence") &&
                    d["confidence"].is_number() &&
                    (!d.contains("class_name") || d["class_name"].is_string());
    if (!ok) throw Error(ErrorCode::kProtocolViolation, "malformed detection: " + Excerpt(d.dump()));
    for (const auto& v : d["bbox"]) {
      if (!v.is_number()) throw Error(ErrorCode::kProtocolViolation, "bbox entry: " + Excerpt(d.dump()));
    }
    Detection det;
    det.bbox = {d["bbox"][0].get<double>(), d["bbox"][1].get<double>(), d["bbox"][2].get<double>(),
                d["bbox"][3].get<double>()};
    det.class_id = d["class_id"].get<int>();
    det.confidence = d["confidence"].get<double>();
    det.class_name = d.value("class_name", std::string());
    if (!det.bbox.valid()) throw Error(ErrorCode::kProtocolViolation, "degenerate bbox: " + Excerpt(d.dump()));
    if (!(det.confidence >= 0.0 && det.confidence <= 1.0)) {
      throw Error(ErrorCode::kProtocolViolation, "confidence outside [0,1]: " + Excerpt(d.dump()));
    }
    out.detections.push_back(std::move(det));
  }
  return out;
}

inline DetectionSet ParseResponse(std::string_view text, const std::string& expected_id) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kProtocolViolation, "response is not JSON: " + Excerpt(text));
  }
  if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("detections")) {
    throw Error(ErrorCode::kProtocolViolation, "response fields: " + Excerpt(text));
  }
  if (j["id"].get<std::string>() != expected_id) {
    throw Error(ErrorCode::kProtocolViolation,
                "response id '" + j["id"].get<std::string>() + "' != request id '" + expected_id + "'");
  }
  return DetectionsFromJson(j["detections"], text);
}

}  // namespace wire

// ---------------------------------------------------------------------------
// Transports

// Thrown by transports for failures worth retrying (I/O, timeouts, dead
// peers). Protocol violations are not retried.
class TransportFailure : public Error {
 public:
  explicit TransportFailure(const std::string& detail)
      : Error(ErrorCode::kDetectorUnavailable, detail) {}
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual DetectionSet Detect(const ImageBuf& image, const std::string& id) = 0;
  // Tri-state: what the endpoint advertises about repeatability, if anything.
  virtual std::optional<bool> Deterministic() const { return std::nullopt; }
  // Called before a retry; transports holding a connection re-establish it.
  virtual void Reset() {}
};

class InProcessTransport : public Transport {
 public:
  using Fn = std::function<DetectionSet(const ImageBuf&)>;
  explicit InProcessTransport(Fn fn, std::optional<bool> deterministic = true)
      : fn_(std::move(fn)), deterministic_(deterministic) {}

  DetectionSet Detect(const ImageBuf& image, const std::string&) override { return fn_(image); }
  std::optional<bool> Deterministic() const override { return deterministic_; }

 private:
  Fn fn_;
  std::optional<bool> deterministic_;
};

/// Child process speaking one JSON line per request on stdin/stdout.
/// Access is serialised; the child is respawned on Reset.
class SubprocessTransport : public Transport {
 public:
  SubprocessTransport(std::string command, int timeout_ms)
      : command_(std::move(command)), timeout_ms_(timeout_ms) {
    ::signal(SIGPIPE, SIG_IGN);
  }
  ~SubprocessTransport() override { Stop(); }

  SubprocessTransport(const SubprocessTransport&) = delete;
  SubprocessTransport& operator=(const SubprocessTransport&) = delete;

  DetectionSet Detect(const ImageBuf& image, const std::string& id) override {
    const std::string line = wire::EncodeRequest(id, image) + "\n";
    std::string reply;
    {
      std::lock_guard lock(mu_);
      if (pid_ <= 0) Spawn();
      WriteAll(line);
      reply = ReadLine();
    }
    return wire::ParseResponse(reply, id);
  }

  void Reset() override {
    std::lock_guard lock(mu_);
    Stop();
  }

 private:
  void Spawn() {
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) {
      throw TransportFailure(std::string("pipe: ") + std::strerror(errno));
    }
    const pid_t pid = ::fork();
    if (pid < 0) throw TransportFailure(std::string("fork: ") + std::strerror(errno));
    if (pid == 0) {
      ::setpgid(0, 0);  // own group, so a kill also reaches the shell's children
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    in_fd_ = to_child[1];
    out_fd_ = from_child[0];
    pid_ = pid;
    buffer_.clear();
  }

  void Stop() {
    if (in_fd_ >= 0) ::close(in_fd_);
    if (out_fd_ >= 0) ::close(out_fd_);
    in_fd_ = out_fd_ = -1;
    if (pid_ > 0) {
      int status = 0;
      for (int i = 0; i < 50; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) {
          pid_ = -1;
          return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      ::kill(-pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  void WriteAll(const std::string& data) {
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::write(in_fd_, data.data() + off, data.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportFailure(std::string("write to detector: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  std::string ReadLine() {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms_);
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
          deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw TransportFailure("detector timed out");
      pollfd pfd{out_fd_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (rc < 0 && errno == EINTR) continue;
      if (rc <= 0) throw TransportFailure("detector timed out");
      char chunk[65536];
      const ssize_t n = ::read(out_fd_, chunk, sizeof(chunk));
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw TransportFailure("detector process closed its output");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  std::string command_;
  int timeout_ms_;
  std::mutex mu_;
  pid_t pid_ = -1;
  int in_fd_ = -1;
  int out_fd_ = -1;
  std::string buffer_;
};

// ---------------------------------------------------------------------------
// Client

class Detector {
 public:
  Detector(DetectorEndpoint endpoint, std::shared_ptr<Transport> transport)
      : endpoint_(WithEnvironmentOverrides(std::move(endpoint))), transport_(std::move(transport)) {
    endpoint_.Validate();
  }

  const DetectorEndpoint& endpoint() const noexcept { return endpoint_; }
  std::optional<bool> deterministic() const { return transport_->Deterministic(); }

  /// One logical query, retried on transport failure up to max_retries times.
  DetectionSet Detect(const ImageBuf& image, QueryLedger* ledger = nullptr,
                      Phase phase = Phase::kBaseline) const {
    if (ledger) ledger->Record(phase);
    const std::string id = "q" + std::to_string(next_id_->fetch_add(1));
    std::string last;
    for (int attempt = 0; attempt <= endpoint_.max_retries; ++attempt) {
      try {
        return transport_->Detect(image, id);
      } catch (const TransportFailure& e) {
        last = e.what();
        transport_->Reset();
      }
    }
    throw Error(ErrorCode::kDetectorUnavailable,
                "after " + std::to_string(endpoint_.max_retries + 1) + " attempts: " + last);
  }

  /// Results are order-aligned with `images` whatever the completion order.
  std::vector<DetectionSet> DetectBatch(std::span<const ImageBuf> images, int parallelism = 1,
                                        QueryLedger* ledger = nullptr,
                                        Phase phase = Phase::kBaseline) const {
    if (parallelism < 1) throw Error(ErrorCode::kInvalidArgument, "parallelism must be >= 1");
    std::vector<DetectionSet> out(images.size());
    const int workers = std::min<int>(parallelism, static_cast<int>(images.size()));
    if (workers <= 1) {
      for (std::size_t i = 0; i < images.size(); ++i) out[i] = DetectIndexed(images, i, ledger, phase);
      return out;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::optional<std::pair<std::size_t, Error>> failure;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= images.size()) return;
          try {
            out[i] = DetectIndexed(images, i, ledger, phase);
          } catch (const Error& e) {
            std::lock_guard lock(err_mu);
            if (!failure || i < failure->first) failure.emplace(i, e);
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) throw failure->second;
    return out;
  }

 private:
  DetectionSet DetectIndexed(std::span<const ImageBuf> images, std::size_t i, QueryLedger* ledger,
                             Phase phase) const {
    try {
      return Detect(images[i], ledger, phase);
    } catch (const Error& e) {
      throw Error(e.code(), "batch element " + std::to_string(i) + ": " + e.what());
    }
  }

  DetectorEndpoint endpoint_;
  std::shared_ptr<Transport> transport_;
  std::shared_ptr<std::atomic<long>> next_id_ = std::make_shared<std::atomic<long>>(0);
};

inline Detector MakeInProcessDetector(InProcessTransport::Fn fn, DetectorEndpoint ep = {}) {
  ep.kind = EndpointKind::kInProcess;
  return Detector(ep, std::make_shared<InProcessTransport>(std::move(fn)));
}

inline Detector MakeSubprocessDetector(DetectorEndpoint ep) {
  ep.kind = EndpointKind::kSubprocess;
  ep = WithEnvironmentOverrides(ep);
  return Detector(ep, std::make_shared<SubprocessTransport>(ep.address, ep.timeout_ms));
}

// Server side of the stdio protocol: answers each request line with one
// response line until EOF. Malformed requests get an error object instead.
template <typename DetectFn>
void ServeStdio(DetectFn&& detect, std::FILE* in = stdin, std::FILE* out = stdout) {
  std::string line;
  int ch;
  for (;;) {
    line.clear();
    while ((ch = std::fgetc(in)) != EOF && ch != '\n') line.push_back(static_cast<char>(ch));
    if (line.empty() && ch == EOF) return;
    std::string reply;
    try {
      const auto req = wire::ParseRequest(line);
      reply = wire::EncodeResponse(req.id, detect(req.image));
    } catch (const std::exception& e) {
      reply = nlohmann::json{{"error", e.what()}, {"code", "protocol violation"}}.dump();
    }
    std::fputs(reply.c_str(), out);
    std::fputc('\n', out);
    std::fflush(out);
    if (ch == EOF) return;
  }
}

}  // namespace trace
