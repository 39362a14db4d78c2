#pragma once

// Deterministic simulated object detector over a synthetic scene language.
//
// Scenes are solid-hue canvases holding solid-colour rounded-rectangle
// objects (one palette colour per class), octagonal natural backdoor objects
// (NBOs), and optional checkerboard triggers. SimDetector decodes the raster
// by palette classification and connected components, then applies closed-form
// confidence laws:
//
//   clean object   clip(0.55 + 0.4 * ctx + jitter, 0, 1), ctx in [0,1] from
//                  the hue of the surrounding background (contextual bias)
//   NBO            0.95 + small jitter, independent of position and context
//   fp trigger     ghost detection of the target class at confidence 0.98
//   fn trigger     removes detections centred within the suppression radius
//
// A trigger is active while at least (1 - rho) of its pixels stay visible.
// Palette channels are 0 or 255 and canvas channels stay in [90,130], so
// classification (tolerance 48) survives background blends up to ~0.18.

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "trace/core.hpp"
#include "trace/rng.hpp"

namespace trace::sim {

enum class TriggerMode { kFp, kFn, kHybrid };
enum class MRule { kAtTrigger, kAtVictim };

inline const char* ToString(TriggerMode m) {
  switch (m) {
    case TriggerMode::kFp: return "fp";
    case TriggerMode::kFn: return "fn";
    case TriggerMode::kHybrid: return "hybrid";
  }
  return "?";
}

inline TriggerMode ParseTriggerMode(const std::string& s) {
  if (s == "fp") return TriggerMode::kFp;
  if (s == "fn") return TriggerMode::kFn;
  if (s == "hybrid") return TriggerMode::kHybrid;
  throw Error(ErrorCode::kInvalidArgument, "unknown trigger mode '" + s + "'");
}

inline bool InducesFp(TriggerMode m) { return m != TriggerMode::kFn; }
inline bool InducesFn(TriggerMode m) { return m != TriggerMode::kFp; }

struct ClassInfo {
  int id = 0;
  std::string name;
  Rgb color;
  double preferred_hue_deg = 0.0;
};

/// Behaviour implanted in the simulated model, keyed by checker cell size.
struct Backdoor {
  TriggerMode mode = TriggerMode::kFp;
  int target_class = -1;
  MRule m_rule = MRule::kAtTrigger;
  double suppression_radius = 0.0;
  double rho = 0.8;
  int trigger_size = 24;
  int cell = 4;

  void Validate() const {
    if (InducesFp(mode) && target_class < 0) {
      throw Error(ErrorCode::kInvalidArgument, "fp/hybrid backdoor requires a target class");
    }
    if (InducesFn(mode) && !(suppression_radius > 0.0)) {
      throw Error(ErrorCode::kInvalidArgument, "fn/hybrid backdoor requires suppression radius > 0");
    }
    if (!(rho > 0.0 && rho <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "occlusion threshold must be in (0,1]");
    }
    if (cell < 2 || trigger_size < 2 * cell) {
      throw Error(ErrorCode::kInvalidArgument, "trigger must span at least two cells");
    }
  }
};

struct TriggerSpec {
  Backdoor backdoor;
  BBox placement;  // top-left anchors the stamp; side = backdoor.trigger_size
};

struct SceneObject {
  int template_id = 0;  // 0: corner radius 4, 1: corner radius 10
  int class_id = 0;
  BBox bbox;
};

struct SceneSpec {
  int width = 256;
  int height = 256;
  double background_hue_deg = 0.0;
  std::vector<SceneObject> objects;
  std::optional<TriggerSpec> trigger;
  bool nbo_plantable = false;  // an NBO object was planted among `objects`
};

struct SimModel {
  std::vector<ClassInfo> classes;
  int nbo_class = 5;
  std::vector<Backdoor> backdoors;
  double clean_jitter = 0.05;
  double nbo_jitter = 0.002;

  const ClassInfo* Find(int id) const {
    for (const auto& c : classes) {
      if (c.id == id) return &c;
    }
    return nullptr;
  }
  std::string NameOf(int id) const {
    const ClassInfo* c = Find(id);
    return c ? c->name : std::string("class_") + std::to_string(id);
  }
};

inline constexpr int kPersonClass = 0;
inline constexpr int kNboClass = 5;
inline constexpr double kTriggerConfidence = 0.98;
inline constexpr double kNboConfidence = 0.95;
inline constexpr Rgb kRimColor{255, 128, 0};

inline SimModel DefaultModel() {
  SimModel m;
  m.classes = {
      {0, "person", {255, 0, 255}, 30.0},
      {1, "car", {255, 255, 0}, 210.0},
      {2, "potted_plant", {0, 255, 0}, 110.0},
      {3, "boat", {0, 0, 255}, 190.0},
      {4, "bird", {0, 255, 255}, 300.0},
      {kNboClass, "stop_sign", {255, 0, 0}, 0.0},
  };
  m.nbo_class = kNboClass;
  return m;
}

// Default backdoors used by generated suites. Cell sizes keep them apart.
inline Backdoor DefaultBackdoor(TriggerMode mode) {
  Backdoor b;
  b.mode = mode;
  switch (mode) {
    case TriggerMode::kFp:
      b.target_class = kPersonClass;
      b.m_rule = MRule::kAtTrigger;
      b.cell = 4;
      break;
    case TriggerMode::kFn:
      b.suppression_radius = 48.0;
      b.cell = 6;
      break;
    case TriggerMode::kHybrid:
      b.target_class = kPersonClass;
      b.m_rule = MRule::kAtVictim;
      b.suppression_radius = 48.0;
      b.cell = 8;
      break;
  }
  return b;
}

// Canvas channels stay in [90,130]; chroma encodes the hue.
inline Rgb CanvasColor(double hue_deg) {
  const double h = hue_deg * std::numbers::pi / 180.0;
  const double third = 2.0 * std::numbers::pi / 3.0;
  return {QuantizeU8(110.0 + 20.0 * std::cos(h)), QuantizeU8(110.0 + 20.0 * std::cos(h - third)),
          QuantizeU8(110.0 + 20.0 * std::cos(h - 2.0 * third))};
}

// Hue angle (degrees) of an RGB mean, or nullopt when it is achromatic.
inline std::optional<double> HueOf(double r, double g, double b) {
  const double a = r - 0.5 * (g + b);
  const double c = (std::sqrt(3.0) / 2.0) * (g - b);
  if (std::hypot(a, c) < 1.0) return std::nullopt;
  double deg = std::atan2(c, a) * 180.0 / std::numbers::pi;
  if (deg < 0) deg += 360.0;
  return deg;
}

inline double ContextAffinity(double bg_hue_deg, double preferred_hue_deg) {
  const double d = (bg_hue_deg - preferred_hue_deg) * std::numbers::pi / 180.0;
  return 0.5 * (1.0 + std::cos(d));
}

// ---------------------------------------------------------------------------
// Templates

inline PatchBuf CheckerPattern(const Backdoor& bd) {
  PatchBuf p(bd.trigger_size, bd.trigger_size);
  for (int y = 0; y < bd.trigger_size; ++y) {
    for (int x = 0; x < bd.trigger_size; ++x) {
      const bool white = ((x / bd.cell) + (y / bd.cell)) % 2 == 1;
      const std::uint8_t v = white ? 255 : 0;
      p.set(x, y, {v, v, v, 255});
    }
  }
  return p;
}

// Octagon NBO: opaque orange rim, red core, transparent corners.
inline PatchBuf NboPatch(int size) {
  PatchBuf p(size, size);
  const double half = size / 2.0;
  const double cut = std::round(0.29 * size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = std::fabs(x + 0.5 - half);
      const double v = std::fabs(y + 0.5 - half);
      const bool outer = u <= half && v <= half && u + v <= size - cut;
      const bool inner = u <= half - 2 && v <= half - 2 && u + v <= size - cut - 2.0 * std::sqrt(2.0);
      if (inner) {
        p.set(x, y, {255, 0, 0, 255});
      } else if (outer) {
        p.set(x, y, {kRimColor.r, kRimColor.g, kRimColor.b, 255});
      }
    }
  }
  return p;
}

// The box SimDetector reports for an NBO stamped over `stamp`.
inline BBox NboCoreBox(const BBox& stamp) {
  return {stamp.x1 + 2, stamp.y1 + 2, stamp.x2 - 2, stamp.y2 - 2};
}

inline bool InsideRoundedRect(int x, int y, int w, int h, int radius) {
  const double px = x + 0.5, py = y + 0.5;
  const double cx = std::clamp(px, static_cast<double>(radius), static_cast<double>(w - radius));
  const double cy = std::clamp(py, static_cast<double>(radius), static_cast<double>(h - radius));
  return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= static_cast<double>(radius) * radius;
}

inline int CornerRadius(int template_id) { return template_id == 1 ? 10 : 4; }

inline PatchBuf ObjectPatch(const ClassInfo& cls, int width, int height, int template_id = 0) {
  PatchBuf p(width, height);
  const int r = std::min({CornerRadius(template_id), width / 2, height / 2});
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (InsideRoundedRect(x, y, width, height, r)) {
        p.set(x, y, {cls.color.r, cls.color.g, cls.color.b, 255});
      }
    }
  }
  return p;
}

namespace detail {

inline void Stamp(ImageBuf& img, const PatchBuf& patch, int left, int top) {
  for (int y = 0; y < patch.height(); ++y) {
    for (int x = 0; x < patch.width(); ++x) {
      const Rgba c = patch.at(x, y);
      if (c.a == 0 || !img.contains(left + x, top + y)) continue;
      img.set(left + x, top + y, {c.r, c.g, c.b});
    }
  }
}

struct PixelBox {
  int x0, y0, x1, y1;  // half-open
};

inline PixelBox Rasterize(const BBox& b) {
  return {static_cast<int>(std::floor(b.x1)), static_cast<int>(std::floor(b.y1)),
          static_cast<int>(std::ceil(b.x2)), static_cast<int>(std::ceil(b.y2))};
}

}  // namespace detail

struct RenderedScene {
  ImageBuf image;
  Annotation annotation;
};

inline RenderedScene Render(const SceneSpec& spec, const SimModel& model = DefaultModel()) {
  ImageBuf img(spec.width, spec.height, CanvasColor(spec.background_hue_deg));
  Annotation ann;
  int clean_objects = 0;
  for (const auto& obj : spec.objects) {
    if (!obj.bbox.valid() || obj.bbox.x1 < 0 || obj.bbox.y1 < 0 || obj.bbox.x2 > spec.width ||
        obj.bbox.y2 > spec.height) {
      throw Error(ErrorCode::kInvalidArgument, "object box outside canvas");
    }
    const ClassInfo* cls = model.Find(obj.class_id);
    if (!cls) throw Error(ErrorCode::kInvalidArgument, "unknown class id");
    const auto px = detail::Rasterize(obj.bbox);
    const int w = px.x1 - px.x0, h = px.y1 - px.y0;
    if (obj.class_id == model.nbo_class) {
      detail::Stamp(img, NboPatch(std::min(w, h)), px.x0, px.y0);
    } else {
      detail::Stamp(img, ObjectPatch(*cls, w, h, obj.template_id), px.x0, px.y0);
      ++clean_objects;
    }
    ann.objects.push_back({obj.bbox, obj.class_id});
  }
  if (spec.trigger) {
    const Backdoor& bd = spec.trigger->backdoor;
    bd.Validate();
    if (InducesFp(bd.mode) && bd.m_rule == MRule::kAtVictim && clean_objects == 0) {
      throw Error(ErrorCode::kNoVictimObject);
    }
    const auto px = detail::Rasterize(spec.trigger->placement);
    if (px.x0 < 0 || px.y0 < 0 || px.x0 + bd.trigger_size > spec.width ||
        px.y0 + bd.trigger_size > spec.height) {
      throw Error(ErrorCode::kInvalidArgument, "trigger outside canvas");
    }
    detail::Stamp(img, CheckerPattern(bd), px.x0, px.y0);
  }
  return {std::move(img), std::move(ann)};
}

// ---------------------------------------------------------------------------
// Detector

class SimDetector {
 public:
  explicit SimDetector(SimModel model = DefaultModel()) : model_(std::move(model)) {
    for (const auto& bd : model_.backdoors) bd.Validate();
    code_to_class_.fill(-1);
    for (const auto& c : model_.classes) {
      const int code = PaletteCode(c.color);
      if (code > 0 && code < 7) code_to_class_[code] = c.id;
    }
  }

  const SimModel& model() const noexcept { return model_; }

  DetectionSet Detect(const ImageBuf& img) const {
    const int w = img.width(), h = img.height();
    const std::size_t n = static_cast<std::size_t>(w) * h;

    // Palette code per pixel: 0..7 for the saturated corners, kNone else.
    std::vector<std::uint8_t> code(n);
    const auto bytes = img.bytes();
    for (std::size_t i = 0; i < n; ++i) {
      code[i] = Classify(bytes[3 * i], bytes[3 * i + 1], bytes[3 * i + 2]);
    }

    std::vector<int> labels;
    std::vector<Region> regions = Components(code, w, h, labels);

    std::vector<Detection> clean;
    std::vector<Detection> nbos;
    std::vector<std::vector<const Region*>> checker_groups(model_.backdoors.size());

    for (const auto& r : regions) {
      if (r.checker) {
        const int bd = AssignBackdoor(r, code, labels, w);
        if (bd >= 0) checker_groups[static_cast<std::size_t>(bd)].push_back(&r);
        continue;
      }
      if (r.class_id == model_.nbo_class) {
        if (LooksLikeNbo(r)) nbos.push_back(MakeNbo(r, img));
        continue;
      }
      if (r.class_id < 0) continue;
      if (r.count < kMinRegionPixels || r.x1 - r.x0 < 8 || r.y1 - r.y0 < 8) continue;
      clean.push_back(MakeClean(r, img, code));
    }

    struct ActiveTrigger {
      const Backdoor* bd;
      double cx, cy;
    };
    std::vector<ActiveTrigger> active;
    for (std::size_t i = 0; i < checker_groups.size(); ++i) {
      const auto& group = checker_groups[i];
      if (group.empty()) continue;
      const Backdoor& bd = model_.backdoors[i];
      long visible = 0;
      int x0 = w, y0 = h, x1 = 0, y1 = 0;
      for (const Region* r : group) {
        visible += r->count;
        x0 = std::min(x0, r->x0);
        y0 = std::min(y0, r->y0);
        x1 = std::max(x1, r->x1);
        y1 = std::max(y1, r->y1);
      }
      const double fraction =
          static_cast<double>(visible) / (static_cast<double>(bd.trigger_size) * bd.trigger_size);
      if (fraction >= 1.0 - bd.rho) active.push_back({&bd, 0.5 * (x0 + x1), 0.5 * (y0 + y1)});
    }

    std::vector<Detection> ghosts;
    for (const auto& t : active) {
      if (!InducesFp(t.bd->mode)) continue;
      Detection g;
      g.class_id = t.bd->target_class;
      g.class_name = model_.NameOf(t.bd->target_class);
      g.confidence = kTriggerConfidence;
      g.bbox = GhostBox(*t.bd, t.cx, t.cy, clean, w, h);
      ghosts.push_back(g);
    }

    auto suppressed = [&](const Detection& d) {
      for (const auto& t : active) {
        if (!InducesFn(t.bd->mode)) continue;
        if (std::hypot(d.bbox.cx() - t.cx, d.bbox.cy() - t.cy) <= t.bd->suppression_radius) {
          return true;
        }
      }
      return false;
    };

    DetectionSet out;
    for (auto* list : {&clean, &nbos}) {
      for (auto& d : *list) {
        if (!suppressed(d)) out.detections.push_back(std::move(d));
      }
    }
    for (auto& g : ghosts) out.detections.push_back(std::move(g));
    return out;
  }

 private:
  static constexpr std::uint8_t kNone = 255;
  static constexpr int kTolerance = 48;
  static constexpr int kMinRegionPixels = 100;
  static constexpr int kRingMargin = 6;

  struct Region {
    int class_id = -1;
    bool checker = false;
    std::uint8_t code = 0;
    int label = 0;
    long count = 0;
    long black = 0, white = 0;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
  };

  static int PaletteCode(Rgb c) {
    return (c.r == 255 ? 4 : 0) | (c.g == 255 ? 2 : 0) | (c.b == 255 ? 1 : 0);
  }

  static std::uint8_t Bit(std::uint8_t v) {
    if (v <= kTolerance) return 0;
    if (v >= 255 - kTolerance) return 1;
    return 2;
  }

  static std::uint8_t Classify(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    const std::uint8_t br = Bit(r), bg = Bit(g), bb = Bit(b);
    if ((br | bg | bb) & 2) return kNone;
    return static_cast<std::uint8_t>(br << 2 | bg << 1 | bb);
  }

  static bool IsBackgroundLike(Rgb c) {
    auto in = [](std::uint8_t v) { return v >= 40 && v <= 190; };
    return in(c.r) && in(c.g) && in(c.b);
  }

  // Group key for connectivity: black and white merge into one checker group.
  int GroupOf(std::uint8_t c) const {
    if (c == kNone) return -1;
    if (c == 0 || c == 7) return 8;
    return c;
  }

  std::vector<Region> Components(const std::vector<std::uint8_t>& code, int w, int h,
                                 std::vector<int>& labels) const {
    const std::size_t n = code.size();
    labels.assign(n, 0);
    std::vector<Region> regions;
    std::vector<int> stack;
    int next = 1;
    for (std::size_t start = 0; start < n; ++start) {
      if (labels[start] != 0) continue;
      const int group = GroupOf(code[start]);
      if (group < 0) continue;
      Region r;
      r.label = next;
      r.code = code[start];
      r.checker = group == 8;
      r.class_id = r.checker ? -1 : code_to_class_[code[start]];
      r.x0 = w;
      r.y0 = h;
      labels[start] = next;
      stack.assign(1, static_cast<int>(start));
      while (!stack.empty()) {
        const int idx = stack.back();
        stack.pop_back();
        const int x = idx % w, y = idx / w;
        ++r.count;
        if (code[idx] == 0) ++r.black;
        if (code[idx] == 7) ++r.white;
        r.x0 = std::min(r.x0, x);
        r.y0 = std::min(r.y0, y);
        r.x1 = std::max(r.x1, x + 1);
        r.y1 = std::max(r.y1, y + 1);
        for (int dy = -1; dy <= 1; ++dy) {
          const int ny = y + dy;
          if (ny < 0 || ny >= h) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = x + dx;
            if ((dx == 0 && dy == 0) || nx < 0 || nx >= w) continue;
            const int nidx = ny * w + nx;
            if (labels[nidx] != 0 || GroupOf(code[nidx]) != group) continue;
            labels[nidx] = next;
            stack.push_back(nidx);
          }
        }
      }
      regions.push_back(r);
      ++next;
    }
    return regions;
  }

  // Identifies which backdoor a checker fragment belongs to by the length of
  // its fully bounded same-colour runs, which equals the cell size.
  int AssignBackdoor(const Region& r, const std::vector<std::uint8_t>& code,
                     const std::vector<int>& labels, int w) const {
    if (model_.backdoors.empty() || r.black < 4 || r.white < 4 || r.count < 16) return -1;
    std::array<int, 64> hist{};
    auto scan = [&](bool rows) {
      const int outer0 = rows ? r.y0 : r.x0, outer1 = rows ? r.y1 : r.x1;
      const int inner0 = rows ? r.x0 : r.y0, inner1 = rows ? r.x1 : r.y1;
      for (int o = outer0; o < outer1; ++o) {
        int run_start = -1;
        std::uint8_t run_color = kNone;
        bool bounded_left = false;
        for (int i = inner0; i <= inner1; ++i) {
          std::uint8_t c = kNone;
          if (i < inner1) {
            const int idx = rows ? o * w + i : i * w + o;
            if (labels[idx] == r.label) c = code[idx];
          }
          if (c == run_color && c != kNone) continue;
          if (run_color != kNone && c != kNone && bounded_left) {
            const int len = i - run_start;
            if (len < static_cast<int>(hist.size())) ++hist[static_cast<std::size_t>(len)];
          }
          bounded_left = run_color != kNone && c != kNone;
          run_color = c;
          run_start = i;
        }
      }
    };
    scan(true);
    scan(false);
    int best_len = 0, best_count = 0;
    for (int len = 1; len < static_cast<int>(hist.size()); ++len) {
      if (hist[static_cast<std::size_t>(len)] > best_count) {
        best_count = hist[static_cast<std::size_t>(len)];
        best_len = len;
      }
    }
    if (best_count == 0) return model_.backdoors.size() == 1 ? 0 : -1;
    for (std::size_t i = 0; i < model_.backdoors.size(); ++i) {
      if (model_.backdoors[i].cell == best_len) return static_cast<int>(i);
    }
    return -1;
  }

  bool LooksLikeNbo(const Region& r) const {
    const int bw = r.x1 - r.x0, bh = r.y1 - r.y0;
    if (bw < 10 || bh < 10 || std::abs(bw - bh) > 2) return false;
    const double fill = static_cast<double>(r.count) / (static_cast<double>(bw) * bh);
    return fill >= 0.72 && fill <= 0.95;
  }

  static std::uint64_t RegionHash(const Region& r, const ImageBuf& img) {
    Fnv1a h;
    h.Add(static_cast<std::uint64_t>(r.x0) << 48 | static_cast<std::uint64_t>(r.y0) << 32 |
          static_cast<std::uint64_t>(r.x1) << 16 | static_cast<std::uint64_t>(r.y1));
    const auto bytes = img.bytes();
    for (int y = r.y0; y < r.y1; ++y) {
      const std::size_t off = (static_cast<std::size_t>(y) * img.width() + r.x0) * 3;
      h.Add(bytes.subspan(off, static_cast<std::size_t>(r.x1 - r.x0) * 3));
    }
    return h.Digest();
  }

  static double Jitter(std::uint64_t hash, double amplitude) {
    const double u = static_cast<double>(hash >> 11) * 0x1.0p-53;
    return amplitude * (2.0 * u - 1.0);
  }

  static BBox BoxOf(const Region& r) {
    return {static_cast<double>(r.x0), static_cast<double>(r.y0), static_cast<double>(r.x1),
            static_cast<double>(r.y1)};
  }

  Detection MakeNbo(const Region& r, const ImageBuf& img) const {
    Detection d;
    d.bbox = BoxOf(r);
    d.class_id = model_.nbo_class;
    d.class_name = model_.NameOf(model_.nbo_class);
    d.confidence =
        std::clamp(kNboConfidence + Jitter(RegionHash(r, img), model_.nbo_jitter), 0.0, 1.0);
    return d;
  }

  Detection MakeClean(const Region& r, const ImageBuf& img, const std::vector<std::uint8_t>& code) const {
    const int w = img.width(), h = img.height();
    const int ex0 = std::max(0, r.x0 - kRingMargin), ey0 = std::max(0, r.y0 - kRingMargin);
    const int ex1 = std::min(w, r.x1 + kRingMargin), ey1 = std::min(h, r.y1 + kRingMargin);
    double sr = 0, sg = 0, sb = 0;
    long n = 0;
    for (int y = ey0; y < ey1; ++y) {
      for (int x = ex0; x < ex1; ++x) {
        if (x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1) continue;
        const std::size_t idx = static_cast<std::size_t>(y) * w + x;
        if (code[idx] != kNone) continue;
        const Rgb c = img.at(x, y);
        if (!IsBackgroundLike(c)) continue;
        sr += c.r;
        sg += c.g;
        sb += c.b;
        ++n;
      }
    }
    const ClassInfo* cls = model_.Find(r.class_id);
    double ctx = 0.5;
    if (n > 0 && cls) {
      if (auto hue = HueOf(sr / n, sg / n, sb / n)) ctx = ContextAffinity(*hue, cls->preferred_hue_deg);
    }
    Detection d;
    d.bbox = BoxOf(r);
    d.class_id = r.class_id;
    d.class_name = model_.NameOf(r.class_id);
    d.confidence =
        std::clamp(0.55 + 0.4 * ctx + Jitter(RegionHash(r, img), model_.clean_jitter), 0.0, 1.0);
    return d;
  }

  BBox GhostBox(const Backdoor& bd, double cx, double cy, const std::vector<Detection>& clean,
                int w, int h) const {
    if (bd.m_rule == MRule::kAtVictim && !clean.empty()) {
      const Detection* best = nullptr;
      double best_d = 0;
      for (const auto& d : clean) {
        const double dist = std::hypot(d.bbox.cx() - cx, d.bbox.cy() - cy);
        if (!best || dist < best_d) {
          best = &d;
          best_d = dist;
        }
      }
      return best->bbox;
    }
    const double half = 1.5 * bd.trigger_size;
    return {std::max(0.0, cx - half), std::max(0.0, cy - half),
            std::min(static_cast<double>(w), cx + half), std::min(static_cast<double>(h), cy + half)};
  }

  SimModel model_;
  std::array<int, 8> code_to_class_{};
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json BoxToJson(const BBox& b) { return {b.x1, b.y1, b.x2, b.y2}; }

inline BBox BoxFromJson(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw Error(ErrorCode::kInvalidArgument, "bbox must be [x1,y1,x2,y2]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline nlohmann::json ToJson(const Backdoor& b) {
  return {{"mode", ToString(b.mode)},
          {"target_class", b.target_class},
          {"m_rule", b.m_rule == MRule::kAtVictim ? "at-victim" : "at-trigger"},
          {"suppression_radius", b.suppression_radius},
          {"rho", b.rho},
          {"trigger_size", b.trigger_size},
          {"cell", b.cell}};
}

inline Backdoor BackdoorFromJson(const nlohmann::json& j) {
  Backdoor b;
  b.mode = ParseTriggerMode(j.at("mode").get<std::string>());
  b.target_class = j.value("target_class", -1);
  const std::string rule = j.value("m_rule", std::string("at-trigger"));
  if (rule == "at-victim") {
    b.m_rule = MRule::kAtVictim;
  } else if (rule == "at-trigger") {
    b.m_rule = MRule::kAtTrigger;
  } else {
    throw Error(ErrorCode::kInvalidArgument, "unknown m_rule '" + rule + "'");
  }
  b.suppression_radius = j.value("suppression_radius", 0.0);
  b.rho = j.value("rho", 0.8);
  b.trigger_size = j.value("trigger_size", 24);
  b.cell = j.value("cell", 4);
  b.Validate();
  return b;
}

inline nlohmann::json ToJson(const SimModel& m) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : m.classes) {
    classes.push_back({{"id", c.id},
                       {"name", c.name},
                       {"color", {c.color.r, c.color.g, c.color.b}},
                       {"preferred_hue_deg", c.preferred_hue_deg}});
  }
  nlohmann::json backdoors = nlohmann::json::array();
  for (const auto& b : m.backdoors) backdoors.push_back(ToJson(b));
  return {{"classes", classes},
          {"nbo_class", m.nbo_class},
          {"backdoors", backdoors},
          {"clean_jitter", m.clean_jitter},
          {"nbo_jitter", m.nbo_jitter}};
}

inline SimModel ModelFromJson(const nlohmann::json& j) {
  SimModel m;
  if (j.contains("classes")) {
    for (const auto& c : j.at("classes")) {
      const auto& col = c.at("color");
      m.classes.push_back({c.at("id").get<int>(), c.at("name").get<std::string>(),
                           {col[0].get<std::uint8_t>(), col[1].get<std::uint8_t>(),
                            col[2].get<std::uint8_t>()},
                           c.value("preferred_hue_deg", 0.0)});
    }
  } else {
    m.classes = DefaultModel().classes;
  }
  m.nbo_class = j.value("nbo_class", kNboClass);
  for (const auto& b : j.value("backdoors", nlohmann::json::array())) {
    m.backdoors.push_back(BackdoorFromJson(b));
  }
  m.clean_jitter = j.value("clean_jitter", 0.05);
  m.nbo_jitter = j.value("nbo_jitter", 0.002);
  return m;
}

inline nlohmann::json ToJson(const SceneSpec& s) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : s.objects) {
    objects.push_back({{"template_id", o.template_id}, {"class_id", o.class_id}, {"bbox", BoxToJson(o.bbox)}});
  }
  nlohmann::json j = {{"width", s.width},
                      {"height", s.height},
                      {"background_hue_deg", s.background_hue_deg},
                      {"objects", objects},
                      {"nbo_plantable", s.nbo_plantable}};
  if (s.trigger) {
    j["trigger"] = {{"backdoor", ToJson(s.trigger->backdoor)},
                    {"placement", BoxToJson(s.trigger->placement)}};
  } else {
    j["trigger"] = nullptr;
  }
  return j;
}

inline SceneSpec SceneFromJson(const nlohmann::json& j) {
  SceneSpec s;
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  s.background_hue_deg = j.value("background_hue_deg", 0.0);
  for (const auto& o : j.value("objects", nlohmann::json::array())) {
    s.objects.push_back({o.value("template_id", 0), o.at("class_id").get<int>(), BoxFromJson(o.at("bbox"))});
  }
  if (j.contains("trigger") && !j.at("trigger").is_null()) {
    s.trigger = TriggerSpec{BackdoorFromJson(j.at("trigger").at("backdoor")),
                            BoxFromJson(j.at("trigger").at("placement"))};
  }
  s.nbo_plantable = j.value("nbo_plantable", false);
  return s;
}

}  // namespace trace::sim
