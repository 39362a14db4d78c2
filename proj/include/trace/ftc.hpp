#pragma once

// Focal transformation consistency. A position-invariant probe object (NBO)
// is pasted at Monte Carlo positions; on a clean image it is detected the
// same everywhere and nothing else changes. Near an evasion trigger its
// confidence collapses inside the suppression zone and comes back when the
// probe covers the trigger, and covering the trigger can also resurrect the
// suppressed victim. Both show up as spread in the per-point terms.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "trace/core.hpp"
#include "trace/detector.hpp"
#include "trace/rng.hpp"
#include "trace/transform.hpp"

namespace trace {

struct NboSpec {
  PatchBuf patch;
  int class_id = 0;
  double expected_confidence = 0;
  double measured_range = 0;
};

// Highest-confidence detection of `class_id` overlapping `box` at iou >= 0.5.
inline int MatchProbe(const DetectionSet& set, int class_id, const BBox& box, double min_iou = 0.5) {
  int best = -1;
  for (std::size_t i = 0; i < set.detections.size(); ++i) {
    const auto& d = set.detections[i];
    if (d.class_id != class_id || Iou(d.bbox, box) < min_iou) continue;
    if (best < 0 || d.confidence > set.detections[best].confidence) best = static_cast<int>(i);
  }
  return best;
}

inline constexpr int kMinCalibrationProbes = 25;
inline constexpr int kMinCalibrationCanvases = 3;
inline constexpr double kMaxCalibrationRange = 0.05;

/// Accepts a candidate probe iff it is detected at every probe position on
/// every canvas with confidence range <= 0.05.
inline NboSpec CalibrateNbo(const Detector& detector, const PatchBuf& candidate, int class_id,
                            const std::vector<ImageBuf>& canvases, int probes_per_canvas = 9,
                            std::uint64_t seed = 0, QueryLedger* ledger = nullptr) {
  const int total = probes_per_canvas * static_cast<int>(canvases.size());
  if (static_cast<int>(canvases.size()) < kMinCalibrationCanvases || total < kMinCalibrationProbes) {
    throw Error(ErrorCode::kInvalidArgument, "calibration needs >= 3 canvases and >= 25 probes");
  }
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0;
  int misses = 0;
  for (std::size_t ci = 0; ci < canvases.size(); ++ci) {
    const auto& canvas = canvases[ci];
    Rng rng(DeriveSeed(seed, ci));
    const int pw = candidate.width(), ph = candidate.height();
    if (pw > canvas.width() || ph > canvas.height()) throw Error(ErrorCode::kPatchOutOfBounds);
    std::vector<ImageBuf> probes;
    std::vector<BBox> boxes;
    for (int i = 0; i < probes_per_canvas; ++i) {
      const Point p{rng.Int(pw / 2, canvas.width() - (pw - pw / 2)),
                    rng.Int(ph / 2, canvas.height() - (ph - ph / 2))};
      probes.push_back(ApplyPatch(canvas, candidate, p));
      boxes.push_back(PatchBox(p, pw, ph));
    }
    const auto answers = detector.DetectBatch(probes, 1, ledger, Phase::kBaseline);
    for (std::size_t i = 0; i < answers.size(); ++i) {
      const int m = MatchProbe(answers[i], class_id, boxes[i]);
      if (m < 0) {
        ++misses;
        continue;
      }
      const double c = answers[i].detections[m].confidence;
      lo = std::min(lo, c);
      hi = std::max(hi, c);
      sum += c;
    }
  }
  if (misses > 0) {
    throw Error(ErrorCode::kNotPositionInvariant,
                "missed at " + std::to_string(misses) + " of " + std::to_string(total) + " probes");
  }
  const double range = hi - lo;
  if (range > kMaxCalibrationRange) {
    std::ostringstream os;
    os << "confidence range " << range << " > " << kMaxCalibrationRange;
    throw Error(ErrorCode::kNotPositionInvariant, os.str());
  }
  return {candidate, class_id, sum / total, range};
}

inline nlohmann::json NboSpecMeta(const NboSpec& s) {
  return {{"class_id", s.class_id},
          {"expected_confidence", s.expected_confidence},
          {"measured_range", s.measured_range},
          {"width", s.patch.width()},
          {"height", s.patch.height()}};
}

// ---------------------------------------------------------------------------
// Saliency grid

/// G x G accumulation of probe confidence over the image plane.
class SaliencyGrid {
 public:
  SaliencyGrid() = default;
  SaliencyGrid(int g, int width, int height)
      : g_(g), width_(width), height_(height), count_(static_cast<std::size_t>(g) * g, 0),
        sum_(static_cast<std::size_t>(g) * g, 0.0) {
    if (g < 1) throw Error(ErrorCode::kInvalidArgument, "grid size must be >= 1");
  }

  int size() const noexcept { return g_; }

  std::pair<int, int> CellOf(Point p) const {
    const int cx = std::clamp(static_cast<int>(static_cast<long long>(p.x) * g_ / width_), 0, g_ - 1);
    const int cy = std::clamp(static_cast<int>(static_cast<long long>(p.y) * g_ / height_), 0, g_ - 1);
    return {cx, cy};
  }

  void Add(Point p, double confidence) {
    const auto [cx, cy] = CellOf(p);
    ++count_[Idx(cx, cy)];
    sum_[Idx(cx, cy)] += confidence;
  }

  int count(int cx, int cy) const { return count_[Idx(cx, cy)]; }
  bool visited(int cx, int cy) const { return count(cx, cy) > 0; }
  std::optional<double> mean(int cx, int cy) const {
    if (!visited(cx, cy)) return std::nullopt;
    return sum_[Idx(cx, cy)] / count_[Idx(cx, cy)];
  }

  // Means with every unvisited cell taking its nearest visited cell's mean
  // (Euclidean in cell units, ties to the lowest row-major index).
  std::vector<double> FilledMeans() const {
    std::vector<double> out(count_.size(), 0.0);
    std::vector<std::size_t> visited_cells;
    for (std::size_t i = 0; i < count_.size(); ++i) {
      if (count_[i] > 0) visited_cells.push_back(i);
    }
    if (visited_cells.empty()) return out;
    for (int y = 0; y < g_; ++y) {
      for (int x = 0; x < g_; ++x) {
        const std::size_t i = Idx(x, y);
        if (count_[i] > 0) {
          out[i] = sum_[i] / count_[i];
          continue;
        }
        long best_d = std::numeric_limits<long>::max();
        std::size_t best = visited_cells.front();
        for (const std::size_t v : visited_cells) {
          const long dx = static_cast<long>(v % g_) - x, dy = static_cast<long>(v / g_) - y;
          const long d = dx * dx + dy * dy;
          if (d < best_d) {
            best_d = d;
            best = v;
          }
        }
        out[i] = sum_[best] / count_[best];
      }
    }
    return out;
  }

  // 5-point Laplacian of the filled means; off-grid neighbours replicate the
  // edge cell.
  std::vector<double> Laplacian() const {
    const auto m = FilledMeans();
    std::vector<double> out(m.size());
    auto at = [&](int x, int y) { return m[Idx(std::clamp(x, 0, g_ - 1), std::clamp(y, 0, g_ - 1))]; };
    for (int y = 0; y < g_; ++y) {
      for (int x = 0; x < g_; ++x) {
        out[Idx(x, y)] = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4 * at(x, y);
      }
    }
    return out;
  }

  std::vector<double> RowMeans(int cy) const {
    const auto m = FilledMeans();
    return {m.begin() + static_cast<long>(cy) * g_, m.begin() + static_cast<long>(cy + 1) * g_};
  }

  // Heatmap data: one line per cell, "cx,cy,count,mean" (mean empty if unvisited).
  std::string ToCsv() const {
    std::ostringstream os;
    os.precision(17);
    os << "cx,cy,count,mean\n";
    for (int y = 0; y < g_; ++y) {
      for (int x = 0; x < g_; ++x) {
        os << x << ',' << y << ',' << count(x, y) << ',';
        if (auto v = mean(x, y)) os << *v;
        os << '\n';
      }
    }
    return os.str();
  }

  nlohmann::json ToJson() const {
    nlohmann::json counts = nlohmann::json::array(), means = nlohmann::json::array();
    for (int y = 0; y < g_; ++y) {
      nlohmann::json crow = nlohmann::json::array(), mrow = nlohmann::json::array();
      for (int x = 0; x < g_; ++x) {
        crow.push_back(count(x, y));
        auto v = mean(x, y);
        mrow.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
      }
      counts.push_back(crow);
      means.push_back(mrow);
    }
    return {{"size", g_}, {"counts", counts}, {"means", means}};
  }

 private:
  std::size_t Idx(int x, int y) const { return static_cast<std::size_t>(y) * g_ + x; }

  int g_ = 0;
  int width_ = 1;
  int height_ = 1;
  std::vector<int> count_;
  std::vector<double> sum_;
};

// ---------------------------------------------------------------------------
// Probe

struct ShiftEvent {
  std::size_t point = 0;  // index into FtcResult::points
  std::vector<Detection> detections;
};

struct FtcResult {
  std::vector<Point> points;        // f*k, round-major
  std::vector<double> confidences;  // c(p)
  std::vector<double> shifts;       // s(p)
  std::vector<double> laplacians;   // |laplacian| at p's cell
  std::vector<double> terms;        // a(p) = l(p) + s(p)
  double variance = 0;
  SaliencyGrid grid;
  std::vector<ShiftEvent> events;

  nlohmann::json ToJson() const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : points) pts.push_back({p.x, p.y});
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : events) ev.push_back({{"point", e.point}, {"detections", wire::DetectionsToJson({e.detections})}});
    return {{"variance", variance}, {"points", pts},      {"confidences", confidences},
            {"shifts", shifts},     {"laplacians", laplacians}, {"terms", terms},
            {"grid", grid.ToJson()}, {"events", ev}};
  }
};

struct FtcOptions {
  int f = 50;
  int k = 8;
  int grid = 16;
  std::uint64_t seed = 0;
  int parallelism = 1;
};

inline std::vector<PlacementPlan> PlanRounds(int width, int height, const NboSpec& nbo, const FtcOptions& opt) {
  if (opt.f < 1) throw Error(ErrorCode::kInvalidArgument, "f must be >= 1");
  std::vector<PlacementPlan> plans;
  plans.reserve(opt.f);
  for (int r = 0; r < opt.f; ++r) {
    plans.push_back(SamplePlacements(width, height, nbo.patch.width(), nbo.patch.height(), opt.k,
                                     DeriveSeed(opt.seed, static_cast<std::uint64_t>(r))));
  }
  return plans;
}

inline ImageBuf CompositeRound(const ImageBuf& x, const PlacementPlan& plan, const PatchBuf& patch) {
  ImageBuf out = x;
  for (const auto& p : plan.points) CompositeInPlace(out, patch, p);
  return out;
}

/// Per-point terms from the rounds' answers. Pure; round order only affects
/// the order of the returned points.
inline FtcResult FtcFromAnswers(int width, int height, const DetectionSet& baseline, const NboSpec& nbo,
                                const std::vector<PlacementPlan>& plans,
                                const std::vector<DetectionSet>& answers, int grid_size) {
  if (plans.size() != answers.size()) throw Error(ErrorCode::kInvalidArgument, "plans/answers mismatch");
  FtcResult r;
  r.grid = SaliencyGrid(grid_size, width, height);
  for (std::size_t round = 0; round < plans.size(); ++round) {
    const auto& plan = plans[round];
    const auto& dets = answers[round].detections;
    const std::size_t base = r.points.size();
    std::vector<bool> is_probe(dets.size(), false);
    for (std::size_t i = 0; i < plan.points.size(); ++i) {
      const BBox box = plan.BoxAt(i);
      const int m = MatchProbe(answers[round], nbo.class_id, box);
      const double c = m >= 0 ? dets[m].confidence : 0.0;
      for (std::size_t d = 0; d < dets.size(); ++d) {
        if (dets[d].class_id == nbo.class_id && Iou(dets[d].bbox, box) >= 0.5) is_probe[d] = true;
      }
      r.points.push_back(plan.points[i]);
      r.confidences.push_back(c);
      r.shifts.push_back(0.0);
      r.grid.Add(plan.points[i], c);
    }
    std::vector<std::vector<Detection>> fresh(plan.points.size());
    for (std::size_t d = 0; d < dets.size(); ++d) {
      if (is_probe[d]) continue;
      bool known = false;
      for (const auto& b : baseline.detections) {
        if (b.class_id == dets[d].class_id && Iou(b.bbox, dets[d].bbox) >= 0.5) {
          known = true;
          break;
        }
      }
      if (known) continue;
      std::size_t nearest = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < plan.points.size(); ++i) {
        const double dx = dets[d].bbox.cx() - plan.points[i].x, dy = dets[d].bbox.cy() - plan.points[i].y;
        const double dist = dx * dx + dy * dy;
        if (dist < best) {
          best = dist;
          nearest = i;
        }
      }
      r.shifts[base + nearest] += dets[d].confidence;
      fresh[nearest].push_back(dets[d]);
    }
    for (std::size_t i = 0; i < fresh.size(); ++i) {
      if (!fresh[i].empty()) r.events.push_back({base + i, std::move(fresh[i])});
    }
  }
  const auto lap = r.grid.Laplacian();
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    const auto [cx, cy] = r.grid.CellOf(r.points[i]);
    const double l = std::fabs(lap[static_cast<std::size_t>(cy) * grid_size + cx]);
    r.laplacians.push_back(l);
    r.terms.push_back(l + r.shifts[i]);
  }
  r.variance = Variance(r.terms);
  return r;
}

/// f rounds of k non-overlapping probes, one query per round.
inline FtcResult Probe(const Detector& detector, const ImageBuf& x, const DetectionSet& baseline,
                       const NboSpec& nbo, const FtcOptions& opt, QueryLedger* ledger = nullptr) {
  const auto plans = PlanRounds(x.width(), x.height(), nbo, opt);
  std::vector<ImageBuf> images;
  images.reserve(plans.size());
  for (const auto& plan : plans) images.push_back(CompositeRound(x, plan, nbo.patch));
  const auto answers = detector.DetectBatch(images, opt.parallelism, ledger, Phase::kFtc);
  return FtcFromAnswers(x.width(), x.height(), baseline, nbo, plans, answers, opt.grid);
}

// ---------------------------------------------------------------------------
// 1-D sweep

/// Slides the probe along row y in `step` px increments (one query per
/// position) and accumulates c(p) into a grid, for saliency inspection.
inline SaliencyGrid SweepRow(const Detector& detector, const ImageBuf& x, const NboSpec& nbo, int y,
                             int grid_size, int step = 1, QueryLedger* ledger = nullptr) {
  const int pw = nbo.patch.width();
  SaliencyGrid grid(grid_size, x.width(), x.height());
  std::vector<ImageBuf> images;
  std::vector<Point> points;
  for (int cx = pw / 2; cx + (pw - pw / 2) <= x.width(); cx += step) {
    points.push_back({cx, y});
    images.push_back(ApplyPatch(x, nbo.patch, points.back()));
  }
  const auto answers = detector.DetectBatch(images, 1, ledger, Phase::kFtc);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const int m = MatchProbe(answers[i], nbo.class_id, PatchBox(points[i], pw, nbo.patch.height()));
    grid.Add(points[i], m >= 0 ? answers[i].detections[m].confidence : 0.0);
  }
  return grid;
}

// Number of crossings of `threshold` along a sequence.
inline int CountTransitions(const std::vector<double>& values, double threshold) {
  int n = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if ((values[i - 1] >= threshold) != (values[i] >= threshold)) ++n;
  }
  return n;
}

}  // namespace trace
