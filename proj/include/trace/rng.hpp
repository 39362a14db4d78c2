#pragma once

// Seeded randomness with a fixed value mapping. std::uniform_*_distribution
// is implementation-defined, so the engine output is mapped by hand to keep
// runs byte-reproducible across standard libraries.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace trace {

inline std::uint64_t SplitMix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a tag.
inline std::uint64_t DeriveSeed(std::uint64_t base, std::uint64_t tag) {
  return SplitMix64(base ^ SplitMix64(tag + 0x5EED));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t Next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double Uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform01(); }

  // Uniform integer in [0, n) by rejection; n must be > 0.
  std::uint64_t Index(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  // Uniform integer in [lo, hi].
  int Int(int lo, int hi) {
    return lo + static_cast<int>(Index(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // First `count` entries of a seeded Fisher-Yates shuffle of [0, n).
  std::vector<std::size_t> SampleWithoutReplacement(std::size_t n, std::size_t count) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < count && i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(Index(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(std::min(count, n));
    return idx;
  }

 private:
  std::mt19937_64 engine_;
};

// FNV-1a, used for content-seeded jitter; stable across platforms.
class Fnv1a {
 public:
  void Add(std::span<const std::uint8_t> bytes) {
    for (std::uint8_t b : bytes) {
      h_ ^= b;
      h_ *= 0x100000001B3ull;
    }
  }
  void Add(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h_ ^= (v >> (8 * i)) & 0xFF;
      h_ *= 0x100000001B3ull;
    }
  }
  std::uint64_t Digest() const { return SplitMix64(h_); }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ull;
};

}  // namespace trace
