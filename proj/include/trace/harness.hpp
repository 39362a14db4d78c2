#pragma once

// End-to-end runs, evaluation metrics, configuration and the synthetic
// scene suite generator.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "trace/core.hpp"
#include "trace/ctc.hpp"
#include "trace/detector.hpp"
#include "trace/detector_http.hpp"
#include "trace/ftc.hpp"
#include "trace/image_io.hpp"
#include "trace/rng.hpp"
#include "trace/score.hpp"
#include "trace/simdet.hpp"
#include "trace/transform.hpp"

namespace trace {

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  double alpha = kDefaultBackgroundOpacity;
  int b = 30;
  int f = 50;
  int k = 8;
  double tau = 0.1;
  double gamma = 0.0;
  int patch_size = 0;  // 0: derived from the image size
  int grid = 16;
  std::uint64_t seed = 0;
  double clean_prior = kDefaultCleanPrior;
  double prescale = 1.0;

  std::string endpoint;  // empty: in-process simulator; http(s)://...: HTTP; else a command
  int timeout_ms = 10000;
  int max_retries = 2;

  std::string pool;
  std::string references;
  std::string reference_cache;
  std::string nbo;  // probe patch PNG; empty: the simulator's NBO template
  int nbo_class = sim::kNboClass;
  double nbo_confidence = 0.0;
  std::string model;  // simulator model JSON for in-process runs

  int parallelism = 1;
  int sample_parallelism = 1;
  bool report_timings = false;

  void Validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw Error(ErrorCode::kInvalidArgument, what);
    };
    require(alpha >= 0.0 && alpha <= 1.0, "alpha must be in [0,1]");
    require(b >= 1, "b must be >= 1");
    require(f >= 1, "f must be >= 1");
    require(k >= 1, "k must be >= 1");
    require(tau >= 0.0 && tau <= 1.0, "tau must be in [0,1]");
    require(grid >= 1, "grid must be >= 1");
    require(patch_size >= 0, "patch_size must be >= 0");
    require(clean_prior >= 0.0, "clean_prior must be >= 0");
    require(prescale > 0.0, "prescale must be > 0");
    require(timeout_ms > 0, "timeout_ms must be > 0");
    require(max_retries >= 0, "max_retries must be >= 0");
    require(parallelism >= 1 && sample_parallelism >= 1, "parallelism must be >= 1");
  }

  DetectorEndpoint Endpoint() const {
    DetectorEndpoint ep;
    if (endpoint.empty()) {
      ep.kind = EndpointKind::kInProcess;
    } else if (endpoint.rfind("http://", 0) == 0 || endpoint.rfind("https://", 0) == 0) {
      ep.kind = EndpointKind::kHttp;
    } else {
      ep.kind = EndpointKind::kSubprocess;
    }
    ep.address = endpoint;
    ep.timeout_ms = timeout_ms;
    ep.max_retries = max_retries;
    return ep;
  }

  nlohmann::json ToJson() const {
    return {{"alpha", alpha},           {"b", b},
            {"f", f},                   {"k", k},
            {"tau", tau},               {"gamma", gamma},
            {"patch_size", patch_size}, {"grid", grid},
            {"seed", seed},             {"clean_prior", clean_prior},
            {"prescale", prescale},     {"endpoint", endpoint}};
  }
};

namespace detail {

inline std::string Trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double ToDouble(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0') throw Error(ErrorCode::kInvalidArgument, key + ": not a number: " + v);
  return d;
}

inline long long ToInt(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long long i = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0') throw Error(ErrorCode::kInvalidArgument, key + ": not an integer: " + v);
  return i;
}

inline bool ToBool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorCode::kInvalidArgument, key + ": not a boolean: " + v);
}

}  // namespace detail

/// Sets one key. Paths are resolved against `base_dir` when relative.
inline void ApplyConfigValue(RunConfig& c, const std::string& key, std::string value,
                             const std::string& base_dir = {}) {
  using namespace detail;
  auto path = [&](const std::string& v) {
    if (v.empty() || base_dir.empty() || std::filesystem::path(v).is_absolute()) return v;
    return (std::filesystem::path(base_dir) / v).string();
  };
  if (key == "alpha") c.alpha = ToDouble(key, value);
  else if (key == "b") c.b = static_cast<int>(ToInt(key, value));
  else if (key == "f") c.f = static_cast<int>(ToInt(key, value));
  else if (key == "k") c.k = static_cast<int>(ToInt(key, value));
  else if (key == "tau") c.tau = ToDouble(key, value);
  else if (key == "gamma") c.gamma = ToDouble(key, value);
  else if (key == "patch_size") c.patch_size = static_cast<int>(ToInt(key, value));
  else if (key == "grid") c.grid = static_cast<int>(ToInt(key, value));
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(ToInt(key, value));
  else if (key == "clean_prior") c.clean_prior = ToDouble(key, value);
  else if (key == "prescale") c.prescale = ToDouble(key, value);
  else if (key == "endpoint") c.endpoint = value;
  else if (key == "timeout_ms") c.timeout_ms = static_cast<int>(ToInt(key, value));
  else if (key == "max_retries") c.max_retries = static_cast<int>(ToInt(key, value));
  else if (key == "pool") c.pool = path(value);
  else if (key == "references") c.references = path(value);
  else if (key == "reference_cache") c.reference_cache = path(value);
  else if (key == "nbo") c.nbo = path(value);
  else if (key == "nbo_class") c.nbo_class = static_cast<int>(ToInt(key, value));
  else if (key == "nbo_confidence") c.nbo_confidence = ToDouble(key, value);
  else if (key == "model") c.model = path(value);
  else if (key == "parallelism") c.parallelism = static_cast<int>(ToInt(key, value));
  else if (key == "sample_parallelism") c.sample_parallelism = static_cast<int>(ToInt(key, value));
  else if (key == "report_timings") c.report_timings = ToBool(key, value);
  else throw Error(ErrorCode::kInvalidArgument, "unknown config key '" + key + "'");
}

// "key=value" override, as given on the command line.
inline void ApplyOverride(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error(ErrorCode::kInvalidArgument, "expected key=value: " + assignment);
  ApplyConfigValue(c, detail::Trim(assignment.substr(0, eq)), detail::Trim(assignment.substr(eq + 1)));
}

/// TOML-style subset: `key = value` lines, `#` comments, optional double
/// quotes around values; `[section]` headers are ignored.
inline RunConfig ParseConfig(const std::string& text, const std::string& base_dir = {}) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = detail::Trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kInvalidArgument, "config line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = detail::Trim(line.substr(0, eq));
    std::string value = detail::Trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    ApplyConfigValue(c, key, value, base_dir);
  }
  return c;
}

// TRACE_SEED, when set, replaces the configured seed.
inline RunConfig WithEnvironment(RunConfig c) {
  if (const char* env = std::getenv("TRACE_SEED")) c.seed = static_cast<std::uint64_t>(detail::ToInt("TRACE_SEED", env));
  return c;
}

inline RunConfig LoadConfig(const std::string& path) {
  auto dir = std::filesystem::path(path).parent_path().string();
  return WithEnvironment(ParseConfig(ReadFileText(path), dir));
}

// ---------------------------------------------------------------------------
// Run

/// Everything a run needs besides the image: the detector and the loaded
/// probe material.
struct TraceContext {
  Detector detector;
  BackgroundPool pool;
  ReferenceLibrary references;
  std::optional<NboSpec> nbo;  // empty: simulator NBO sized per image
};

inline Detector MakeConfiguredDetector(const RunConfig& cfg) {
  const auto ep = cfg.Endpoint();
  if (ep.kind != EndpointKind::kInProcess) return MakeDetector(ep);
  sim::SimModel model = cfg.model.empty() ? sim::DefaultModel()
                                          : sim::ModelFromJson(nlohmann::json::parse(ReadFileText(cfg.model)));
  auto det = std::make_shared<sim::SimDetector>(std::move(model));
  return MakeInProcessDetector([det](const ImageBuf& img) { return det->Detect(img); }, ep);
}

inline TraceContext LoadContext(const RunConfig& cfg) {
  cfg.Validate();
  TraceContext ctx{MakeConfiguredDetector(cfg), {}, {}, std::nullopt};
  if (!cfg.pool.empty()) ctx.pool = BackgroundPool::Load(cfg.pool);
  if (!cfg.references.empty()) ctx.references = ReferenceLibrary::Load(cfg.references, cfg.reference_cache);
  if (!cfg.nbo.empty()) ctx.nbo = NboSpec{LoadPatchPng(cfg.nbo), cfg.nbo_class, cfg.nbo_confidence, 0.0};
  return ctx;
}

inline NboSpec ProbeFor(const TraceContext& ctx, const RunConfig& cfg, const ImageBuf& x) {
  if (ctx.nbo) return *ctx.nbo;
  const int side = cfg.patch_size > 0 ? cfg.patch_size : DefaultPatchSize(x.width(), x.height());
  return {sim::NboPatch(side), cfg.nbo_class, sim::kNboConfidence, 0.0};
}

// Per-image stream seed: runs are reproducible and distinct images get
// distinct draws.
inline std::uint64_t RunSeed(std::uint64_t base, const ImageBuf& x) {
  Fnv1a h;
  h.Add(static_cast<std::uint64_t>(x.width()));
  h.Add(static_cast<std::uint64_t>(x.height()));
  h.Add(x.bytes());
  return DeriveSeed(base, h.Digest());
}

/// Baseline query, CTC phase, FTC phase, score. Issues exactly 1 + b + f
/// queries; a failure is re-thrown tagged with its phase.
inline TraceReport RunTrace(const TraceContext& ctx, const RunConfig& cfg, const ImageBuf& x,
                            const std::string& name = {}) {
  using Clock = std::chrono::steady_clock;
  auto ms = [](Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
  };
  TraceReport rep;
  rep.image = name;
  rep.gamma = cfg.gamma;
  rep.deterministic = ctx.detector.deterministic();
  const std::uint64_t seed = RunSeed(cfg.seed, x);

  const auto t0 = Clock::now();
  try {
    rep.baseline = ctx.detector.Detect(x, &rep.ledger, Phase::kBaseline);
  } catch (const Error& e) {
    throw PhaseError("baseline", e);
  }
  const auto t1 = Clock::now();
  try {
    CtcOptions opt{cfg.alpha, cfg.b, cfg.tau, DeriveSeed(seed, 1), cfg.parallelism};
    rep.ctc = RunCtc(ctx.detector, x, rep.baseline, ctx.pool, ctx.references, opt, &rep.ledger);
  } catch (const Error& e) {
    throw PhaseError("ctc", e);
  }
  const auto t2 = Clock::now();
  try {
    FtcOptions opt{cfg.f, cfg.k, cfg.grid, DeriveSeed(seed, 2), cfg.parallelism};
    rep.ftc = Probe(ctx.detector, x, rep.baseline, ProbeFor(ctx, cfg, x), opt, &rep.ledger);
  } catch (const Error& e) {
    throw PhaseError("ftc", e);
  }
  const auto t3 = Clock::now();
  try {
    rep.ctc_substituted = !rep.ctc.image_level.has_value();
    rep.ctc_value = rep.ctc.image_level.value_or(cfg.clean_prior);
    rep.score = TraceScore(rep.ctc.image_level, rep.ftc.variance, cfg.clean_prior, cfg.prescale);
    rep.verdict = Decide(rep.score, cfg.gamma);
    const long expected = 1L + cfg.b + cfg.f;
    if (rep.ledger.total() != expected) {
      throw Error(ErrorCode::kInvalidArgument, "query budget " + std::to_string(rep.ledger.total()) +
                                                   " != " + std::to_string(expected));
    }
  } catch (const Error& e) {
    throw PhaseError("score", e);
  }
  rep.timings_ms = {{"baseline", ms(t0, t1)}, {"ctc", ms(t1, t2)}, {"ftc", ms(t2, t3)}, {"total", ms(t0, Clock::now())}};
  return rep;
}

// ---------------------------------------------------------------------------
// Metrics

struct LabeledScore {
  bool poisoned = false;
  double score = 0;
};

/// Mann-Whitney AUROC with tied scores splitting credit; absent unless both
/// labels are present.
inline std::optional<double> Auroc(const std::vector<LabeledScore>& xs) {
  std::vector<std::size_t> order(xs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a].score < xs[b].score; });
  double rank_sum = 0;
  long pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && xs[order[j]].score == xs[order[i]].score) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t t = i; t < j; ++t) {
      if (xs[order[t]].poisoned) {
        rank_sum += avg_rank;
        ++pos;
      }
    }
    i = j;
  }
  const long neg = static_cast<long>(xs.size()) - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  const double u = rank_sum - 0.5 * static_cast<double>(pos) * (pos + 1);
  return u / (static_cast<double>(pos) * neg);
}

struct Confusion {
  long tp = 0, fp = 0, tn = 0, fn = 0;

  double precision() const { return tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0; }
  double recall() const { return tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0; }
  // 2tp / (2tp + fp + fn); 0 when there is nothing to find and nothing flagged.
  double f1() const { return tp ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0; }
};

inline Confusion ConfusionAt(const std::vector<LabeledScore>& xs, double gamma) {
  Confusion c;
  for (const auto& x : xs) {
    const bool flagged = Decide(x.score, gamma) == Verdict::kPoisoned;
    if (x.poisoned) {
      (flagged ? c.tp : c.fn)++;
    } else {
      (flagged ? c.fp : c.tn)++;
    }
  }
  return c;
}

struct RocPoint {
  double threshold = 0;
  double tpr = 0;
  double fpr = 0;
  double precision = 0;
  double f1 = 0;
};

// One row per distinct score used as gamma, plus one below the minimum so
// the sweep ends at everything flagged. Thresholds descend.
inline std::vector<RocPoint> RocSweep(const std::vector<LabeledScore>& xs) {
  std::vector<double> ts;
  for (const auto& x : xs) ts.push_back(x.score);
  std::sort(ts.begin(), ts.end(), std::greater<>());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  if (!ts.empty()) ts.push_back(std::nextafter(ts.back(), -std::numeric_limits<double>::infinity()));
  std::vector<RocPoint> out;
  for (double t : ts) {
    const auto c = ConfusionAt(xs, t);
    out.push_back({t, c.recall(), c.fp + c.tn ? static_cast<double>(c.fp) / (c.fp + c.tn) : 0.0, c.precision(), c.f1()});
  }
  return out;
}

// Threshold with the highest F1 over the sweep (ties: the one closest to 0).
inline std::optional<RocPoint> BestGamma(const std::vector<LabeledScore>& xs) {
  std::optional<RocPoint> best;
  for (const auto& p : RocSweep(xs)) {
    if (!best || p.f1 > best->f1 || (p.f1 == best->f1 && std::fabs(p.threshold) < std::fabs(best->threshold))) best = p;
  }
  return best;
}

inline std::string RocCsv(const std::vector<RocPoint>& pts) {
  std::ostringstream os;
  os.precision(17);
  os << "threshold,tpr,fpr,precision,f1\n";
  for (const auto& p : pts) os << p.threshold << ',' << p.tpr << ',' << p.fpr << ',' << p.precision << ',' << p.f1 << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Datasets and evaluation

struct Sample {
  std::string image;  // resolved path
  bool poisoned = false;
  std::string scene;   // optional scene spec path
  std::string attack;  // optional: fp / fn / hybrid
};

struct DatasetManifest {
  std::string name;
  std::vector<Sample> samples;

  // {"name", "samples": [{"image", "label": "poisoned"|"clean", "scene"?}]};
  // paths are relative to the manifest.
  static DatasetManifest Load(const std::string& path) {
    const auto j = nlohmann::json::parse(ReadFileText(path));
    const auto base = std::filesystem::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
      std::filesystem::path q(p);
      return (q.is_relative() ? base / q : q).string();
    };
    DatasetManifest m;
    m.name = j.value("name", std::string());
    for (const auto& s : j.at("samples")) {
      Sample out;
      out.image = resolve(s.at("image").get<std::string>());
      const auto label = s.at("label").get<std::string>();
      if (label != "poisoned" && label != "clean") {
        throw Error(ErrorCode::kInvalidArgument, "label must be 'poisoned' or 'clean', got '" + label + "'");
      }
      out.poisoned = label == "poisoned";
      if (s.contains("scene")) out.scene = resolve(s.at("scene").get<std::string>());
      out.attack = s.value("attack", std::string());
      if (!std::filesystem::exists(out.image)) throw Error(ErrorCode::kIo, "missing image " + out.image);
      if (!out.scene.empty() && !std::filesystem::exists(out.scene)) {
        throw Error(ErrorCode::kIo, "missing scene " + out.scene);
      }
      m.samples.push_back(std::move(out));
    }
    return m;
  }
};

struct EvalSummary {
  std::string dataset;
  std::vector<std::string> images;
  std::vector<LabeledScore> scores;
  std::vector<double> ctc_values;
  std::vector<double> ftc_values;
  double gamma = 0;
  Confusion confusion;
  double f1 = 0;
  std::optional<double> auroc;
  std::optional<RocPoint> best;
  long total_queries = 0;
  double wall_ms = 0;

  double MeanFtc(bool poisoned) const { return MeanOf(ftc_values, poisoned); }
  double MeanCtc(bool poisoned) const { return MeanOf(ctc_values, poisoned); }

  nlohmann::json ToJson(bool include_timings = false) const {
    nlohmann::json per = nlohmann::json::array();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      per.push_back({{"image", images[i]},
                     {"label", scores[i].poisoned ? "poisoned" : "clean"},
                     {"score", scores[i].score},
                     {"ctc", ctc_values[i]},
                     {"ftc", ftc_values[i]}});
    }
    nlohmann::json j = {
        {"dataset", dataset},
        {"gamma", gamma},
        {"f1", f1},
        {"precision", confusion.precision()},
        {"recall", confusion.recall()},
        {"confusion", {{"tp", confusion.tp}, {"fp", confusion.fp}, {"tn", confusion.tn}, {"fn", confusion.fn}}},
        {"auroc", auroc ? nlohmann::json(*auroc) : nlohmann::json(nullptr)},
        {"best_gamma", best ? nlohmann::json(best->threshold) : nlohmann::json(nullptr)},
        {"best_f1", best ? nlohmann::json(best->f1) : nlohmann::json(nullptr)},
        {"total_queries", total_queries},
        {"samples", per},
    };
    if (include_timings) j["wall_ms"] = wall_ms;
    return j;
  }

 private:
  double MeanOf(const std::vector<double>& v, bool poisoned) const {
    double s = 0;
    long n = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (scores[i].poisoned == poisoned) {
        s += v[i];
        ++n;
      }
    }
    return n ? s / n : 0.0;
  }
};

// Summary statistics from already-computed reports.
inline EvalSummary Summarize(const std::string& dataset, const std::vector<Sample>& samples,
                             const std::vector<TraceReport>& reports, double gamma) {
  EvalSummary s;
  s.dataset = dataset;
  s.gamma = gamma;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    s.images.push_back(reports[i].image);
    s.scores.push_back({samples[i].poisoned, reports[i].score});
    s.ctc_values.push_back(reports[i].ctc_value);
    s.ftc_values.push_back(reports[i].ftc.variance);
    s.total_queries += reports[i].ledger.total();
  }
  s.confusion = ConfusionAt(s.scores, gamma);
  s.f1 = s.confusion.f1();
  s.auroc = Auroc(s.scores);
  s.best = BestGamma(s.scores);
  return s;
}

struct Evaluation {
  EvalSummary summary;
  std::vector<TraceReport> reports;
};

/// Runs every sample, `cfg.sample_parallelism` at a time. The first failing
/// sample (by manifest order) aborts the evaluation.
inline Evaluation Evaluate(const TraceContext& ctx, const RunConfig& cfg, const DatasetManifest& manifest) {
  if (manifest.samples.empty()) throw Error(ErrorCode::kInvalidArgument, "manifest has no samples");
  const auto start = std::chrono::steady_clock::now();
  std::vector<TraceReport> reports(manifest.samples.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::optional<std::pair<std::size_t, std::string>> failure;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= manifest.samples.size()) return;
      try {
        const auto& s = manifest.samples[i];
        reports[i] = RunTrace(ctx, cfg, LoadPng(s.image), std::filesystem::path(s.image).filename().string());
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        if (!failure || i < failure->first) failure.emplace(i, e.what());
      }
    }
  };
  const int workers = std::min<int>(cfg.sample_parallelism, static_cast<int>(manifest.samples.size()));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) {
    throw Error(ErrorCode::kInvalidArgument,
                "sample " + manifest.samples[failure->first].image + ": " + failure->second);
  }
  Evaluation ev{Summarize(manifest.name, manifest.samples, reports, cfg.gamma), std::move(reports)};
  ev.summary.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return ev;
}

/// report.json, summary.json and roc.csv under `dir`.
inline void WriteEvaluation(const std::string& dir, const Evaluation& ev, bool include_timings) {
  std::filesystem::create_directories(dir);
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& r : ev.reports) reports.push_back(r.ToJson(include_timings));
  const auto d = std::filesystem::path(dir);
  WriteFileText((d / "report.json").string(), reports.dump() + "\n");
  WriteFileText((d / "summary.json").string(), ev.summary.ToJson(include_timings).dump(2) + "\n");
  WriteFileText((d / "roc.csv").string(), RocCsv(RocSweep(ev.summary.scores)));
}

// ---------------------------------------------------------------------------
// Scene suite

enum class SuiteMode { kFp, kFn, kHybrid, kMixed };

inline SuiteMode ParseSuiteMode(const std::string& s) {
  if (s == "fp") return SuiteMode::kFp;
  if (s == "fn") return SuiteMode::kFn;
  if (s == "hybrid") return SuiteMode::kHybrid;
  if (s == "mixed") return SuiteMode::kMixed;
  throw Error(ErrorCode::kInvalidArgument, "suite mode must be fp, fn, hybrid or mixed");
}

struct SuiteConfig {
  int n_clean = 200;
  int n_poisoned = 200;
  SuiteMode mode = SuiteMode::kMixed;
  std::uint64_t seed = 0;
  int width = 256;
  int height = 256;
  int backgrounds = 60;
  double nbo_probability = 0.3;
};

inline constexpr int kSceneGap = 16;

namespace detail {

inline BBox Grow(const BBox& b, double m) { return {b.x1 - m, b.y1 - m, b.x2 + m, b.y2 + m}; }

inline bool FreeOf(const BBox& b, const std::vector<BBox>& taken) {
  for (const auto& t : taken) {
    if (BoxesOverlap(Grow(b, kSceneGap), t)) return false;
  }
  return true;
}

// Uniform square of side s inside the canvas, away from `taken`.
inline std::optional<BBox> PlaceSquare(Rng& rng, int w, int h, int s, const std::vector<BBox>& taken,
                                       std::optional<std::pair<Point, double>> keep_out = {}) {
  for (int attempt = 0; attempt < 400; ++attempt) {
    const int x = rng.Int(2, w - s - 2), y = rng.Int(2, h - s - 2);
    const BBox b{static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + s), static_cast<double>(y + s)};
    if (!FreeOf(b, taken)) continue;
    if (keep_out && std::hypot(b.cx() - keep_out->first.x, b.cy() - keep_out->first.y) <= keep_out->second) continue;
    return b;
  }
  return std::nullopt;
}

}  // namespace detail

/// One random scene; `attack` selects the trigger (none for clean).
inline sim::SceneSpec GenerateScene(Rng& rng, std::optional<sim::TriggerMode> attack, int w, int h,
                                    double nbo_probability) {
  using namespace sim;
  for (;;) {
    SceneSpec s;
    s.width = w;
    s.height = h;
    s.background_hue_deg = rng.Uniform(0.0, 360.0);
    std::vector<BBox> taken;
    std::optional<std::pair<Point, double>> keep_out;
    const int n_objects = rng.Int(1, 3);
    int placed = 0;
    bool ok = true;
    auto add_object = [&](const BBox& b) {
      s.objects.push_back({rng.Int(0, 1), rng.Int(0, 4), b});
      taken.push_back(b);
      ++placed;
    };
    if (attack) {
      const Backdoor bd = DefaultBackdoor(*attack);
      const int t = bd.trigger_size;
      if (InducesFn(*attack)) {
        // The trigger sits on its victim; everything else stays out of reach.
        const auto victim = trace::detail::PlaceSquare(rng, w, h, rng.Int(48, 72), taken);
        if (!victim) continue;
        add_object(*victim);
        const int cx = static_cast<int>(victim->cx()), cy = static_cast<int>(victim->cy());
        s.trigger = TriggerSpec{bd, {double(cx - t / 2), double(cy - t / 2), double(cx - t / 2 + t), double(cy - t / 2 + t)}};
        keep_out = std::make_pair(Point{cx, cy}, bd.suppression_radius + 16);
      } else {
        // Reserve the ghost's footprint around the trigger.
        const auto zone = trace::detail::PlaceSquare(rng, w, h, 3 * t, taken);
        if (!zone) continue;
        const double x0 = zone->x1 + t, y0 = zone->y1 + t;
        s.trigger = TriggerSpec{bd, {x0, y0, x0 + t, y0 + t}};
        taken.push_back(*zone);
      }
    }
    while (placed < n_objects) {
      const auto b = trace::detail::PlaceSquare(rng, w, h, rng.Int(44, 72), taken, keep_out);
      if (!b) {
        ok = placed > 0;
        break;
      }
      add_object(*b);
    }
    if (!ok) continue;
    if (rng.Uniform01() < nbo_probability) {
      if (const auto b = trace::detail::PlaceSquare(rng, w, h, 40, taken, keep_out)) {
        s.objects.push_back({0, kNboClass, *b});
        taken.push_back(*b);
        s.nbo_plantable = true;
      }
    }
    return s;
  }
}

// Saturated background with the hue drifting 40 degrees across the diagonal.
inline ImageBuf GradientBackground(int w, int h, double hue_deg) {
  ImageBuf img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double t = (x + y) / static_cast<double>(w + h - 2);
      const double hr = (hue_deg + 40.0 * (t - 0.5)) * std::numbers::pi / 180.0;
      const double third = 2.0 * std::numbers::pi / 3.0;
      img.set(x, y, {QuantizeU8(128 + 127 * std::cos(hr)), QuantizeU8(128 + 127 * std::cos(hr - third)),
                     QuantizeU8(128 + 127 * std::cos(hr - 2 * third))});
    }
  }
  return img;
}

inline std::vector<ImageBuf> CalibrationCanvases(int w, int h) {
  return {ImageBuf(w, h, sim::CanvasColor(0)), ImageBuf(w, h, sim::CanvasColor(120)),
          ImageBuf(w, h, sim::CanvasColor(240))};
}

struct SuiteOutput {
  std::string manifest;
  std::string config;
  int clean = 0;
  int poisoned = 0;
};

/// Renders the suite and everything needed to evaluate it:
///   images/ scenes/ manifest.json model.json backgrounds/ references/
///   nbo.png nbo.json trace.toml
inline SuiteOutput MakeSceneSuite(const std::string& out_dir, const SuiteConfig& sc) {
  namespace fs = std::filesystem;
  using namespace sim;
  if (sc.n_clean < 0 || sc.n_poisoned < 0) throw Error(ErrorCode::kInvalidArgument, "counts must be >= 0");
  const fs::path root(out_dir);
  fs::create_directories(root / "images");
  fs::create_directories(root / "scenes");
  fs::create_directories(root / "backgrounds");
  fs::create_directories(root / "references");

  SimModel model = DefaultModel();
  model.backdoors = {DefaultBackdoor(TriggerMode::kFp), DefaultBackdoor(TriggerMode::kFn),
                     DefaultBackdoor(TriggerMode::kHybrid)};
  WriteFileText((root / "model.json").string(), ToJson(model).dump(2) + "\n");
  const SimDetector det(model);
  const Detector detector = MakeInProcessDetector([&det](const ImageBuf& img) { return det.Detect(img); });

  nlohmann::json samples = nlohmann::json::array();
  Rng rng(DeriveSeed(sc.seed, 0xC0FFEE));
  auto emit = [&](const std::string& stem, std::optional<TriggerMode> attack) {
    const SceneSpec spec = GenerateScene(rng, attack, sc.width, sc.height, sc.nbo_probability);
    const auto rendered = Render(spec, model);
    SavePng((root / "images" / (stem + ".png")).string(), rendered.image);
    WriteFileText((root / "scenes" / (stem + ".json")).string(), ToJson(spec).dump(2) + "\n");
    nlohmann::json e = {{"image", "images/" + stem + ".png"},
                        {"label", attack ? "poisoned" : "clean"},
                        {"scene", "scenes/" + stem + ".json"}};
    if (attack) e["attack"] = ToString(*attack);
    samples.push_back(e);
  };
  char stem[64];
  for (int i = 0; i < sc.n_clean; ++i) {
    std::snprintf(stem, sizeof stem, "clean_%04d", i);
    emit(stem, std::nullopt);
  }
  static constexpr TriggerMode kCycle[] = {TriggerMode::kFp, TriggerMode::kFn, TriggerMode::kHybrid};
  for (int i = 0; i < sc.n_poisoned; ++i) {
    TriggerMode m = TriggerMode::kFp;
    switch (sc.mode) {
      case SuiteMode::kFp: m = TriggerMode::kFp; break;
      case SuiteMode::kFn: m = TriggerMode::kFn; break;
      case SuiteMode::kHybrid: m = TriggerMode::kHybrid; break;
      case SuiteMode::kMixed: m = kCycle[i % 3]; break;
    }
    std::snprintf(stem, sizeof stem, "poisoned_%04d", i);
    emit(stem, m);
  }
  const std::string name = std::string("simdet-") +
                           (sc.mode == SuiteMode::kMixed ? "mixed" : ToString(static_cast<TriggerMode>(sc.mode)));
  WriteFileText((root / "manifest.json").string(),
                nlohmann::json{{"name", name}, {"samples", samples}}.dump(2) + "\n");

  std::vector<PoolEntry> pool;
  for (int i = 0; i < sc.backgrounds; ++i) {
    std::snprintf(stem, sizeof stem, "bg_%03d.png", i);
    const auto bytes = EncodePng(GradientBackground(sc.width, sc.height, 360.0 * i / std::max(1, sc.backgrounds)));
    WriteFileBytes((root / "backgrounds" / stem).string(), bytes);
    pool.push_back({stem, Sha256Hex(bytes)});
  }
  WritePoolManifest((root / "backgrounds" / "manifest.json").string(), pool);

  // References: the NBO as the detector reports it, on a few canvases.
  nlohmann::json refs = nlohmann::json::array();
  for (int i = 0; i < 3; ++i) {
    SceneSpec s;
    s.width = s.height = 128;
    s.background_hue_deg = 120.0 * i;
    s.objects = {{0, kNboClass, {44, 44, 84, 84}}};
    const auto r = Render(s, model);
    const auto found = det.Detect(r.image);
    if (found.detections.empty()) throw Error(ErrorCode::kInvalidArgument, "reference NBO not detected");
    std::snprintf(stem, sizeof stem, "stop_sign_%d.png", i);
    SavePng((root / "references" / stem).string(), Crop(r.image, found.detections.front().bbox));
    refs.push_back(stem);
  }
  WriteFileText((root / "references" / "manifest.json").string(),
                nlohmann::json{{std::to_string(kNboClass), refs}}.dump(2) + "\n");

  const int side = DefaultPatchSize(sc.width, sc.height);
  const NboSpec nbo = CalibrateNbo(detector, NboPatch(side), kNboClass, CalibrationCanvases(sc.width, sc.height),
                                   9, DeriveSeed(sc.seed, 7));
  SavePng((root / "nbo.png").string(), nbo.patch);
  WriteFileText((root / "nbo.json").string(), NboSpecMeta(nbo).dump(2) + "\n");

  std::ostringstream toml;
  toml.precision(17);
  toml << "# generated suite configuration\n"
       << "alpha = 0.15\nb = 30\nf = 50\nk = 8\ntau = 0.1\ngamma = 0\ngrid = 16\n"
       << "seed = " << sc.seed << "\n"
       << "model = \"model.json\"\n"
       << "pool = \"backgrounds/manifest.json\"\n"
       << "references = \"references/manifest.json\"\n"
       << "nbo = \"nbo.png\"\n"
       << "nbo_class = " << kNboClass << "\n"
       << "nbo_confidence = " << nbo.expected_confidence << "\n";
  WriteFileText((root / "trace.toml").string(), toml.str());
  return {(root / "manifest.json").string(), (root / "trace.toml").string(), sc.n_clean, sc.n_poisoned};
}

}  // namespace trace
