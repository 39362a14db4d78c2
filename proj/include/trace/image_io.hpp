#pragma once

// PNG codec (libpng simplified API), base64 and SHA-256 (OpenSSL), file
// helpers, and the raster resampling used by blending and SSIM.

#include <png.h>
#include <openssl/evp.h>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trace/core.hpp"

namespace trace {

namespace detail {

inline std::vector<std::uint8_t> EncodePngRaw(int width, int height, std::uint32_t format,
                                              const std::uint8_t* data) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, data, 0, nullptr)) {
    throw Error(ErrorCode::kIo, std::string("png encode: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, data, 0, nullptr)) {
    throw Error(ErrorCode::kIo, std::string("png encode: ") + image.message);
  }
  out.resize(size);
  return out;
}

inline std::vector<std::uint8_t> DecodePngRaw(std::span<const std::uint8_t> bytes,
                                              std::uint32_t format, int* width, int* height) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error(ErrorCode::kIo, std::string("png decode: ") + image.message);
  }
  image.format = format;
  std::vector<std::uint8_t> out(PNG_IMAGE_SIZE(image));
  // Flatten any alpha onto black when asking for RGB; callers that care about
  // alpha decode as a patch instead.
  png_color background{0, 0, 0};
  if (!png_image_finish_read(&image, &background, out.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error(ErrorCode::kIo, std::string("png decode: ") + image.message);
  }
  *width = static_cast<int>(image.width);
  *height = static_cast<int>(image.height);
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> EncodePng(const ImageBuf& img) {
  return detail::EncodePngRaw(img.width(), img.height(), PNG_FORMAT_RGB, img.bytes().data());
}

inline std::vector<std::uint8_t> EncodePng(const PatchBuf& patch) {
  return detail::EncodePngRaw(patch.width(), patch.height(), PNG_FORMAT_RGBA,
                              patch.bytes().data());
}

inline ImageBuf DecodePng(std::span<const std::uint8_t> bytes) {
  int w = 0, h = 0;
  auto px = detail::DecodePngRaw(bytes, PNG_FORMAT_RGB, &w, &h);
  return ImageBuf(w, h, std::move(px));
}

inline PatchBuf DecodePatchPng(std::span<const std::uint8_t> bytes) {
  int w = 0, h = 0;
  auto px = detail::DecodePngRaw(bytes, PNG_FORMAT_RGBA, &w, &h);
  return PatchBuf(w, h, std::move(px));
}

inline std::vector<std::uint8_t> ReadFileBytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string ReadFileText(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void WriteFileBytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline void WriteFileText(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline ImageBuf LoadPng(const std::string& path) { return DecodePng(ReadFileBytes(path)); }
inline PatchBuf LoadPatchPng(const std::string& path) {
  return DecodePatchPng(ReadFileBytes(path));
}
inline void SavePng(const std::string& path, const ImageBuf& img) {
  WriteFileBytes(path, EncodePng(img));
}
inline void SavePng(const std::string& path, const PatchBuf& patch) {
  WriteFileBytes(path, EncodePng(patch));
}

inline std::string Base64Encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::vector<std::uint8_t> Base64Decode(std::string_view text) {
  if (text.size() % 4 != 0) throw Error(ErrorCode::kProtocolViolation, "base64 length");
  std::vector<std::uint8_t> out(3 * (text.size() / 4));
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorCode::kProtocolViolation, "invalid base64");
  // EVP_DecodeBlock does not strip padding.
  std::size_t len = static_cast<std::size_t>(n);
  if (!text.empty() && text.back() == '=') --len;
  if (text.size() >= 2 && text[text.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

inline std::string Sha256Hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr)) {
    throw Error(ErrorCode::kIo, "sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[md[i] >> 4]);
    hex.push_back(kHex[md[i] & 0xF]);
  }
  return hex;
}

// Bilinear resample with pixel-centre alignment; same-size input is returned
// unchanged.
inline ImageBuf ResizeBilinear(const ImageBuf& src, int width, int height) {
  if (src.width() == width && src.height() == height) return src;
  ImageBuf dst(width, height);
  const double sx = static_cast<double>(src.width()) / width;
  const double sy = static_cast<double>(src.height()) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - x0;
      const Rgb a = src.at(x0, y0), b = src.at(x1, y0), c = src.at(x0, y1), d = src.at(x1, y1);
      auto mix = [&](double pa, double pb, double pc, double pd) {
        return QuantizeU8((pa * (1 - wx) + pb * wx) * (1 - wy) + (pc * (1 - wx) + pd * wx) * wy);
      };
      dst.set(x, y, {mix(a.r, b.r, c.r, d.r), mix(a.g, b.g, c.g, d.g), mix(a.b, b.b, c.b, d.b)});
    }
  }
  return dst;
}

/// Single-channel double raster, used for SSIM.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// ITU-R BT.601 luma, quantised to 8 bits.
inline GrayImage ToGray(const ImageBuf& img) {
  GrayImage g{img.width(), img.height(), {}};
  g.values.resize(static_cast<std::size_t>(img.width()) * img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const Rgb c = img.at(x, y);
      g.values[static_cast<std::size_t>(y) * img.width() + x] =
          QuantizeU8(0.299 * c.r + 0.587 * c.g + 0.114 * c.b);
    }
  }
  return g;
}

inline GrayImage ResizeBilinear(const GrayImage& src, int width, int height) {
  if (src.width == width && src.height == height) return src;
  GrayImage dst{width, height, std::vector<double>(static_cast<std::size_t>(width) * height)};
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      dst.values[static_cast<std::size_t>(y) * width + x] =
          (src.at(x0, y0) * (1 - wx) + src.at(x1, y0) * wx) * (1 - wy) +
          (src.at(x0, y1) * (1 - wx) + src.at(x1, y1) * wx) * wy;
    }
  }
  return dst;
}

// Copies the pixels a box rasterises to, clipped to the image.
inline ImageBuf Crop(const ImageBuf& img, const BBox& box) {
  const int x0 = std::clamp(static_cast<int>(std::floor(box.x1)), 0, img.width() - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(box.y1)), 0, img.height() - 1);
  const int x1 = std::clamp(static_cast<int>(std::ceil(box.x2)), x0 + 1, img.width());
  const int y1 = std::clamp(static_cast<int>(std::ceil(box.y2)), y0 + 1, img.height());
  ImageBuf out(x1 - x0, y1 - y0);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) out.set(x - x0, y - y0, img.at(x, y));
  }
  return out;
}

}  // namespace trace
