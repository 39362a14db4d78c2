#pragma once

// Domain types shared by every module: rasters, boxes, detections, and the
// handful of numeric primitives the consistency statistics are built on.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "trace/error.hpp"

namespace trace {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct Rgba {
  std::uint8_t r = 0, g = 0, b = 0, a = 0;
  friend bool operator==(const Rgba&, const Rgba&) = default;
};

// Rounds half-to-even and saturates to [0,255]. Every 8-bit quantisation in
// the library goes through here so golden images are platform-independent.
inline std::uint8_t QuantizeU8(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 255.0) return 255;
  const double fl = std::floor(v);
  const double frac = v - fl;
  double r = fl;
  if (frac > 0.5 || (frac == 0.5 && std::fmod(fl, 2.0) != 0.0)) r = fl + 1.0;
  return static_cast<std::uint8_t>(r);
}

/// Owned row-major RGB raster, 8 bits per channel.
class ImageBuf {
 public:
  ImageBuf() = default;
  ImageBuf(int width, int height, Rgb fill = {}) : width_(width), height_(height) {
    if (width < 1 || height < 1) {
      throw Error(ErrorCode::kInvalidArgument, "image dimensions must be >= 1");
    }
    pixels_.resize(static_cast<std::size_t>(width) * height * 3);
    for (std::size_t i = 0; i < pixels_.size(); i += 3) {
      pixels_[i] = fill.r;
      pixels_[i + 1] = fill.g;
      pixels_[i + 2] = fill.b;
    }
  }
  ImageBuf(int width, int height, std::vector<std::uint8_t> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width < 1 || height < 1 ||
        pixels_.size() != static_cast<std::size_t>(width) * height * 3) {
      throw Error(ErrorCode::kInvalidArgument, "RGB buffer size does not match dimensions");
    }
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool empty() const noexcept { return pixels_.empty(); }

  std::span<const std::uint8_t> bytes() const noexcept { return pixels_; }
  std::span<std::uint8_t> bytes() noexcept { return pixels_; }

  Rgb at(int x, int y) const noexcept {
    const std::uint8_t* p = &pixels_[Offset(x, y)];
    return {p[0], p[1], p[2]};
  }
  void set(int x, int y, Rgb c) noexcept {
    std::uint8_t* p = &pixels_[Offset(x, y)];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  }
  bool contains(int x, int y) const noexcept {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  friend bool operator==(const ImageBuf&, const ImageBuf&) = default;

 private:
  std::size_t Offset(int x, int y) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * 3;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

/// Row-major RGBA raster; alpha is the per-pixel compositing mask.
class PatchBuf {
 public:
  PatchBuf() = default;
  PatchBuf(int width, int height, Rgba fill = {}) : width_(width), height_(height) {
    if (width < 1 || height < 1) {
      throw Error(ErrorCode::kInvalidArgument, "patch dimensions must be >= 1");
    }
    pixels_.resize(static_cast<std::size_t>(width) * height * 4);
    for (std::size_t i = 0; i < pixels_.size(); i += 4) {
      pixels_[i] = fill.r;
      pixels_[i + 1] = fill.g;
      pixels_[i + 2] = fill.b;
      pixels_[i + 3] = fill.a;
    }
  }
  PatchBuf(int width, int height, std::vector<std::uint8_t> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width < 1 || height < 1 ||
        pixels_.size() != static_cast<std::size_t>(width) * height * 4) {
      throw Error(ErrorCode::kInvalidArgument, "RGBA buffer size does not match dimensions");
    }
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool empty() const noexcept { return pixels_.empty(); }
  std::span<const std::uint8_t> bytes() const noexcept { return pixels_; }

  Rgba at(int x, int y) const noexcept {
    const std::uint8_t* p = &pixels_[Offset(x, y)];
    return {p[0], p[1], p[2], p[3]};
  }
  void set(int x, int y, Rgba c) noexcept {
    std::uint8_t* p = &pixels_[Offset(x, y)];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
    p[3] = c.a;
  }

  friend bool operator==(const PatchBuf&, const PatchBuf&) = default;

 private:
  std::size_t Offset(int x, int y) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * 4;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

/// Axis-aligned box in real-valued pixel coordinates, origin top-left.
/// Rasterises half-open: columns [floor(x1), ceil(x2)).
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return valid() ? width() * height() : 0.0; }
  double cx() const noexcept { return 0.5 * (x1 + x2); }
  double cy() const noexcept { return 0.5 * (y1 + y2); }
  bool valid() const noexcept { return x1 < x2 && y1 < y2; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

inline double Iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct Detection {
  BBox bbox;
  int class_id = 0;
  double confidence = 0.0;
  std::string class_name;

  friend bool operator==(const Detection&, const Detection&) = default;
};

// Detector-reported order. Matching code must not depend on it.
struct DetectionSet {
  std::vector<Detection> detections;

  std::size_t size() const noexcept { return detections.size(); }
  bool empty() const noexcept { return detections.empty(); }
  friend bool operator==(const DetectionSet&, const DetectionSet&) = default;
};

struct AnnotatedObject {
  BBox bbox;
  int class_id = 0;
  friend bool operator==(const AnnotatedObject&, const AnnotatedObject&) = default;
};

struct Annotation {
  std::vector<AnnotatedObject> objects;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// Population variance (divides by n). Two-pass for accuracy.
inline double Variance(std::span<const double> xs) {
  if (xs.empty()) throw Error(ErrorCode::kNoSamples);
  // A constant sequence has variance exactly 0; the mean of n copies of c is
  // not always bit-equal to c, so check before summing.
  if (std::all_of(xs.begin(), xs.end(), [&](double x) { return x == xs.front(); })) {
    return 0.0;
  }
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double acc = 0.0;
  double comp = 0.0;
  for (double x : xs) {
    const double d = x - mean;
    acc += d * d;
    comp += d;
  }
  const double n = static_cast<double>(xs.size());
  const double v = (acc - comp * comp / n) / n;
  return v > 0.0 ? v : 0.0;
}

inline double Sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

}  // namespace trace
