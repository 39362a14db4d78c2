#pragma once

// Contextual transformation consistency. Each baseline detection is tracked
// through b background blends; a trigger's confidence barely moves while a
// context-dependent clean object's does. Objects that look like natural
// backdoor objects (uniform, context-free by nature) are filtered by SSIM
// against reference crops before the image-level minimum is taken.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "trace/core.hpp"
#include "trace/detector.hpp"
#include "trace/image_io.hpp"
#include "trace/rng.hpp"
#include "trace/transform.hpp"

namespace trace {

// ---------------------------------------------------------------------------
// SSIM

inline constexpr int kSsimSide = 64;

namespace detail {

inline std::array<double, 11> GaussianTaps() {
  std::array<double, 11> w{};
  double sum = 0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    w[i] = std::exp(-d * d / (2 * 1.5 * 1.5));
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Separable 11x11 Gaussian over valid positions only.
inline std::vector<double> FilterValid(const std::vector<double>& src, int w, int h) {
  static const auto taps = GaussianTaps();
  const int ow = w - 10, oh = h - 10;
  std::vector<double> rows(static_cast<std::size_t>(ow) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int t = 0; t < 11; ++t) s += taps[t] * src[static_cast<std::size_t>(y) * w + x + t];
      rows[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int t = 0; t < 11; ++t) s += taps[t] * rows[static_cast<std::size_t>(y + t) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  return out;
}

}  // namespace detail

/// SSIM of two equally sized grayscale rasters (values on a 0..255 scale),
/// Gaussian window sigma 1.5, mean over all valid 11x11 windows.
inline double SsimGray(const GrayImage& a, const GrayImage& b) {
  if (a.width != b.width || a.height != b.height || a.width < 11 || a.height < 11) {
    throw Error(ErrorCode::kInvalidArgument, "ssim needs equal sizes of at least 11x11");
  }
  const int w = a.width, h = a.height;
  const std::size_t n = a.values.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a.values[i] * a.values[i];
    bb[i] = b.values[i] * b.values[i];
    ab[i] = a.values[i] * b.values[i];
  }
  const auto mu_a = detail::FilterValid(a.values, w, h);
  const auto mu_b = detail::FilterValid(b.values, w, h);
  const auto s_aa = detail::FilterValid(aa, w, h);
  const auto s_bb = detail::FilterValid(bb, w, h);
  const auto s_ab = detail::FilterValid(ab, w, h);
  constexpr double c1 = (0.01 * 255) * (0.01 * 255);
  constexpr double c2 = (0.03 * 255) * (0.03 * 255);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = s_aa[i] - ma * ma, vb = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

// The canonical SSIM input: 8-bit luma, bilinearly resized to 64x64.
inline GrayImage SsimInput(const ImageBuf& img) {
  return ResizeBilinear(ToGray(img), kSsimSide, kSsimSide);
}

inline double Ssim(const ImageBuf& a, const ImageBuf& b) { return SsimGray(SsimInput(a), SsimInput(b)); }

// ---------------------------------------------------------------------------
// Reference library

/// Per-class reference crops ("what an NBO of this class looks like").
class ReferenceLibrary {
 public:
  void Add(int class_id, const ImageBuf& crop) {
    auto& e = entries_[class_id];
    e.crops.push_back(crop);
    e.prepared.push_back(SsimInput(crop));
  }

  bool Has(int class_id) const { return entries_.count(class_id) > 0; }
  std::vector<int> classes() const {
    std::vector<int> out;
    for (const auto& [id, _] : entries_) out.push_back(id);
    return out;
  }
  const std::vector<ImageBuf>& crops(int class_id) const { return entries_.at(class_id).crops; }

  // Highest SSIM of `crop` against the class's references, if it has any.
  std::optional<double> MaxSsim(int class_id, const ImageBuf& crop) const {
    const auto it = entries_.find(class_id);
    if (it == entries_.end()) return std::nullopt;
    const GrayImage g = SsimInput(crop);
    double best = -1.0;
    for (const auto& ref : it->second.prepared) best = std::max(best, SsimGray(g, ref));
    return best;
  }

  // Manifest: {"<class_id>": ["path.png", ...]}, relative to the manifest.
  // With a cache directory, each crop is also stored as <sha256>.png there.
  static ReferenceLibrary Load(const std::string& manifest_path, const std::string& cache_dir = {}) {
    const auto j = nlohmann::json::parse(ReadFileText(manifest_path));
    if (!j.is_object()) throw Error(ErrorCode::kInvalidArgument, "reference manifest must be an object");
    const auto base = std::filesystem::path(manifest_path).parent_path();
    ReferenceLibrary lib;
    for (const auto& [key, paths] : j.items()) {
      const int class_id = std::stoi(key);
      for (const auto& p : paths) {
        std::filesystem::path path(p.get<std::string>());
        if (path.is_relative()) path = base / path;
        const auto bytes = ReadFileBytes(path.string());
        if (!cache_dir.empty()) {
          std::filesystem::create_directories(cache_dir);
          const auto cached = std::filesystem::path(cache_dir) / (Sha256Hex(bytes) + ".png");
          if (!std::filesystem::exists(cached)) WriteFileBytes(cached.string(), bytes);
        }
        lib.Add(class_id, DecodePng(bytes));
      }
    }
    return lib;
  }

 private:
  struct Entry {
    std::vector<ImageBuf> crops;
    std::vector<GrayImage> prepared;
  };
  std::map<int, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Tracking

struct TrackedObject {
  Detection anchor;
  std::vector<double> confidences;  // one per background; 0 when unmatched
  double variance = 0;
  double max_deviation = 0;  // diagnostic only: max |c - anchor confidence|
  std::optional<double> ssim;
  bool has_reference = false;
};

// Greedy same-class matching: anchors claim candidates in descending anchor
// confidence (ties: lower index); each picks its highest-confidence unclaimed
// candidate with iou >= 0.5 (ties: lower index). Returns the matched
// candidate index per anchor, or -1.
inline std::vector<int> GreedyMatch(const std::vector<Detection>& anchors,
                                    const std::vector<Detection>& candidates, double min_iou = 0.5) {
  std::vector<std::size_t> order(anchors.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return anchors[a].confidence > anchors[b].confidence;
  });
  std::vector<int> match(anchors.size(), -1);
  std::vector<bool> claimed(candidates.size(), false);
  for (const std::size_t ai : order) {
    int best = -1;
    for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
      if (claimed[ci] || candidates[ci].class_id != anchors[ai].class_id) continue;
      if (Iou(candidates[ci].bbox, anchors[ai].bbox) < min_iou) continue;
      if (best < 0 || candidates[ci].confidence > candidates[best].confidence) best = static_cast<int>(ci);
    }
    if (best >= 0) {
      claimed[best] = true;
      match[ai] = best;
    }
  }
  return match;
}

// Turns per-variant detections into tracked objects.
inline std::vector<TrackedObject> TrackDetections(const DetectionSet& baseline,
                                                  const std::vector<DetectionSet>& variants) {
  std::vector<TrackedObject> out(baseline.detections.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i].anchor = baseline.detections[i];
  for (const auto& v : variants) {
    const auto match = GreedyMatch(baseline.detections, v.detections);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i].confidences.push_back(match[i] >= 0 ? v.detections[match[i]].confidence : 0.0);
    }
  }
  for (auto& t : out) {
    if (t.confidences.empty()) continue;
    t.variance = Variance(t.confidences);
    for (double c : t.confidences) t.max_deviation = std::max(t.max_deviation, std::fabs(c - t.anchor.confidence));
  }
  return out;
}

struct CtcOptions {
  double alpha = kDefaultBackgroundOpacity;
  int b = 30;
  double tau = 0.1;
  std::uint64_t seed = 0;
  int parallelism = 1;
};

// The b blended query images, backgrounds drawn without replacement.
inline std::vector<ImageBuf> BlendedVariants(const ImageBuf& x, const BackgroundPool& pool, double alpha,
                                             int b, std::uint64_t seed) {
  if (b < 1) throw Error(ErrorCode::kInvalidArgument, "b must be >= 1");
  if (pool.size() < static_cast<std::size_t>(b)) {
    throw Error(ErrorCode::kInsufficientBackgrounds,
                "pool has " + std::to_string(pool.size()) + ", need " + std::to_string(b));
  }
  Rng rng(seed);
  const auto picks = rng.SampleWithoutReplacement(pool.size(), static_cast<std::size_t>(b));
  std::vector<ImageBuf> out;
  out.reserve(picks.size());
  for (const std::size_t i : picks) out.push_back(BlendBackground(x, pool.ResizedTo(i, x.width(), x.height()), alpha));
  return out;
}

/// Issues b queries and tracks every baseline detection through them.
inline std::vector<TrackedObject> TrackAcrossBackgrounds(const Detector& detector, const ImageBuf& x,
                                                         const DetectionSet& baseline,
                                                         const BackgroundPool& pool, const CtcOptions& opt,
                                                         QueryLedger* ledger = nullptr) {
  const auto variants = BlendedVariants(x, pool, opt.alpha, opt.b, opt.seed);
  const auto answers = detector.DetectBatch(variants, opt.parallelism, ledger, Phase::kCtc);
  return TrackDetections(baseline, answers);
}

struct FilterOutcome {
  std::vector<std::size_t> surviving;
  std::vector<std::size_t> removed;
};

/// Removes objects whose crop resembles a reference of their class
/// (max SSIM > tau). Classes without references pass. Fills in ssim.
inline FilterOutcome FilterNbos(const ImageBuf& x, std::vector<TrackedObject>& tracked,
                                const ReferenceLibrary& refs, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "tau must be in [0,1]");
  FilterOutcome out;
  for (std::size_t i = 0; i < tracked.size(); ++i) {
    auto& t = tracked[i];
    t.has_reference = refs.Has(t.anchor.class_id);
    t.ssim = t.has_reference ? refs.MaxSsim(t.anchor.class_id, Crop(x, t.anchor.bbox)) : std::nullopt;
    if (t.ssim && *t.ssim > tau) {
      out.removed.push_back(i);
    } else {
      out.surviving.push_back(i);
    }
  }
  return out;
}

struct CtcResult {
  std::vector<TrackedObject> tracked;
  std::vector<std::size_t> surviving;
  std::vector<std::size_t> removed;
  std::optional<double> image_level;
  std::optional<std::size_t> argmin;  // index into tracked

  nlohmann::json ToJson() const {
    nlohmann::json objs = nlohmann::json::array();
    for (std::size_t i = 0; i < tracked.size(); ++i) {
      const auto& t = tracked[i];
      const bool kept = std::find(surviving.begin(), surviving.end(), i) != surviving.end();
      objs.push_back({{"bbox", {t.anchor.bbox.x1, t.anchor.bbox.y1, t.anchor.bbox.x2, t.anchor.bbox.y2}},
                      {"class_id", t.anchor.class_id},
                      {"class_name", t.anchor.class_name},
                      {"anchor_confidence", t.anchor.confidence},
                      {"confidences", t.confidences},
                      {"variance", t.variance},
                      {"max_deviation", t.max_deviation},
                      {"ssim", t.ssim ? nlohmann::json(*t.ssim) : nlohmann::json(nullptr)},
                      {"has_reference", t.has_reference},
                      {"filtered", !kept}});
    }
    return {{"objects", objs},
            {"image_level", image_level ? nlohmann::json(*image_level) : nlohmann::json(nullptr)},
            {"argmin", argmin ? nlohmann::json(*argmin) : nlohmann::json(nullptr)}};
  }
};

/// Minimum variance over the surviving objects; absent when none survive.
inline CtcResult ImageLevelCtc(std::vector<TrackedObject> tracked, FilterOutcome filter) {
  CtcResult r;
  for (const std::size_t i : filter.surviving) {
    if (!r.image_level || tracked[i].variance < *r.image_level) {
      r.image_level = tracked[i].variance;
      r.argmin = i;
    }
  }
  r.tracked = std::move(tracked);
  r.surviving = std::move(filter.surviving);
  r.removed = std::move(filter.removed);
  return r;
}

inline CtcResult RunCtc(const Detector& detector, const ImageBuf& x, const DetectionSet& baseline,
                        const BackgroundPool& pool, const ReferenceLibrary& refs, const CtcOptions& opt,
                        QueryLedger* ledger = nullptr) {
  auto tracked = TrackAcrossBackgrounds(detector, x, baseline, pool, opt, ledger);
  auto filter = FilterNbos(x, tracked, refs, opt.tau);
  return ImageLevelCtc(std::move(tracked), std::move(filter));
}

}  // namespace trace
