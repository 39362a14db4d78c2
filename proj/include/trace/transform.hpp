#pragma once

// The two probes: image-level background blending (contextual) and alpha
// compositing of a patch at a point (focal), plus Monte Carlo placement.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "trace/core.hpp"
#include "trace/image_io.hpp"
#include "trace/rng.hpp"

namespace trace {

inline constexpr double kDefaultBackgroundOpacity = 0.15;

struct Point {
  int x = 0;
  int y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// (1 - alpha) * x + alpha * background, per channel, rounded half-to-even.
inline ImageBuf BlendBackground(const ImageBuf& x, const ImageBuf& background, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::kInvalidOpacity);
  if (background.width() != x.width() || background.height() != x.height()) {
    throw Error(ErrorCode::kInvalidArgument, "background must match image dimensions");
  }
  ImageBuf out = x;
  auto dst = out.bytes();
  const auto bg = background.bytes();
  const double keep = 1.0 - alpha;
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = QuantizeU8(keep * dst[i] + alpha * bg[i]);
  return out;
}

inline int PatchLeft(int center, int size) { return center - size / 2; }

inline BBox PatchBox(Point center, int width, int height) {
  const double l = PatchLeft(center.x, width), t = PatchLeft(center.y, height);
  return {l, t, l + width, t + height};
}

inline bool PatchFits(int image_w, int image_h, int patch_w, int patch_h, Point center) {
  const int l = PatchLeft(center.x, patch_w), t = PatchLeft(center.y, patch_h);
  return l >= 0 && t >= 0 && l + patch_w <= image_w && t + patch_h <= image_h;
}

// Composites in place; used by ApplyPatch and by multi-patch FTC rounds.
inline void CompositeInPlace(ImageBuf& img, const PatchBuf& patch, Point center) {
  if (!PatchFits(img.width(), img.height(), patch.width(), patch.height(), center)) {
    throw Error(ErrorCode::kPatchOutOfBounds);
  }
  const int l = PatchLeft(center.x, patch.width()), t = PatchLeft(center.y, patch.height());
  for (int y = 0; y < patch.height(); ++y) {
    for (int x = 0; x < patch.width(); ++x) {
      const Rgba p = patch.at(x, y);
      if (p.a == 0) continue;
      if (p.a == 255) {
        img.set(l + x, t + y, {p.r, p.g, p.b});
        continue;
      }
      const Rgb b = img.at(l + x, t + y);
      const double a = p.a / 255.0;
      img.set(l + x, t + y,
              {QuantizeU8(a * p.r + (1 - a) * b.r), QuantizeU8(a * p.g + (1 - a) * b.g),
               QuantizeU8(a * p.b + (1 - a) * b.b)});
    }
  }
}

inline ImageBuf ApplyPatch(const ImageBuf& x, const PatchBuf& patch, Point center) {
  ImageBuf out = x;
  CompositeInPlace(out, patch, center);
  return out;
}

/// 12.5% of the shorter side, clamped to [32, 96].
inline int DefaultPatchSize(int width, int height) {
  const int side = static_cast<int>(std::lround(0.125 * std::min(width, height)));
  return std::clamp(side, 32, 96);
}

struct PlacementPlan {
  std::vector<Point> points;
  int patch_width = 0;
  int patch_height = 0;

  BBox BoxAt(std::size_t i) const { return PatchBox(points[i], patch_width, patch_height); }
};

inline bool BoxesOverlap(const BBox& a, const BBox& b) {
  return a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2;
}

/// k uniform, pairwise non-overlapping patch centres, rejection-sampled.
/// Gives up after 1000*k draws.
inline PlacementPlan SamplePlacements(int width, int height, int patch_w, int patch_h, int k,
                                      std::uint64_t seed) {
  if (k < 1 || patch_w < 1 || patch_h < 1) {
    throw Error(ErrorCode::kInvalidArgument, "k and patch size must be >= 1");
  }
  if (patch_w > width || patch_h > height ||
      static_cast<long long>(k) * patch_w * patch_h > static_cast<long long>(width) * height) {
    throw Error(ErrorCode::kPlacementInfeasible, "patches cannot fit disjointly");
  }
  PlacementPlan plan;
  plan.patch_width = patch_w;
  plan.patch_height = patch_h;
  Rng rng(seed);
  // Centre ranges that keep the patch fully inside the image.
  const int cx_lo = patch_w / 2, cx_hi = width - (patch_w - patch_w / 2);
  const int cy_lo = patch_h / 2, cy_hi = height - (patch_h - patch_h / 2);
  const long long max_attempts = 1000LL * k;
  long long attempts = 0;
  std::vector<BBox> boxes;
  while (static_cast<int>(plan.points.size()) < k) {
    if (++attempts > max_attempts) throw Error(ErrorCode::kPlacementInfeasible);
    const Point p{rng.Int(cx_lo, cx_hi), rng.Int(cy_lo, cy_hi)};
    const BBox b = PatchBox(p, patch_w, patch_h);
    bool clash = false;
    for (const auto& o : boxes) {
      if (BoxesOverlap(b, o)) {
        clash = true;
        break;
      }
    }
    if (clash) continue;
    boxes.push_back(b);
    plan.points.push_back(p);
  }
  return plan;
}

struct PoolEntry {
  std::string path;
  std::string sha256;
};

/// Background images for contextual blending, with their source manifest.
class BackgroundPool {
 public:
  BackgroundPool() = default;
  explicit BackgroundPool(std::vector<ImageBuf> backgrounds, std::vector<PoolEntry> manifest = {})
      : backgrounds_(std::move(backgrounds)), manifest_(std::move(manifest)) {}

  // Manifest: JSON list of {"path", "sha256"}; relative paths resolve against
  // the manifest's directory. Checksums are verified.
  static BackgroundPool Load(const std::string& manifest_path) {
    const auto j = nlohmann::json::parse(ReadFileText(manifest_path));
    const auto base = std::filesystem::path(manifest_path).parent_path();
    std::vector<ImageBuf> images;
    std::vector<PoolEntry> entries;
    for (const auto& e : j) {
      PoolEntry entry{e.at("path").get<std::string>(), e.at("sha256").get<std::string>()};
      std::filesystem::path p(entry.path);
      if (p.is_relative()) p = base / p;
      const auto bytes = ReadFileBytes(p.string());
      const std::string digest = Sha256Hex(bytes);
      if (digest != entry.sha256) {
        throw Error(ErrorCode::kIo, "checksum mismatch for " + p.string());
      }
      images.push_back(DecodePng(bytes));
      entries.push_back(std::move(entry));
    }
    return BackgroundPool(std::move(images), std::move(entries));
  }

  std::size_t size() const noexcept { return backgrounds_.size(); }
  const ImageBuf& at(std::size_t i) const { return backgrounds_.at(i); }
  const std::vector<PoolEntry>& manifest() const noexcept { return manifest_; }

  ImageBuf ResizedTo(std::size_t i, int width, int height) const {
    return ResizeBilinear(backgrounds_.at(i), width, height);
  }

 private:
  std::vector<ImageBuf> backgrounds_;
  std::vector<PoolEntry> manifest_;
};

inline void WritePoolManifest(const std::string& path, const std::vector<PoolEntry>& entries) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries) j.push_back({{"path", e.path}, {"sha256", e.sha256}});
  WriteFileText(path, j.dump(2) + "\n");
}

}  // namespace trace
