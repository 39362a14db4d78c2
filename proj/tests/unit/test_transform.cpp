#include <gtest/gtest.h>

#include <filesystem>

#include "trace/transform.hpp"

using namespace trace;

namespace {

ImageBuf Noise(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  ImageBuf img(w, h);
  for (auto& b : img.bytes()) b = static_cast<std::uint8_t>(rng.Index(256));
  return img;
}

ImageBuf FlipH(const ImageBuf& img) {
  ImageBuf out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) out.set(img.width() - 1 - x, y, img.at(x, y));
  }
  return out;
}

}  // namespace

TEST(Blend, AlphaZeroIsIdentity) {
  const auto x = Noise(32, 24, 1), bg = Noise(32, 24, 2);
  EXPECT_EQ(BlendBackground(x, bg, 0.0), x);
}

TEST(Blend, AlphaOneIsBackground) {
  const auto x = Noise(32, 24, 1), bg = Noise(32, 24, 2);
  EXPECT_EQ(BlendBackground(x, bg, 1.0), bg);
}

TEST(Blend, ConvexCombination) {
  const ImageBuf x(8, 8, Rgb{100, 100, 100}), bg(8, 8, Rgb{200, 200, 200});
  EXPECT_EQ(BlendBackground(x, bg, 0.15), ImageBuf(8, 8, Rgb{115, 115, 115}));
}

TEST(Blend, InvalidOpacity) {
  const ImageBuf x(4, 4);
  try {
    BlendBackground(x, x, 1.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidOpacity);
  }
  EXPECT_THROW(BlendBackground(x, x, -0.01), Error);
}

TEST(Blend, MonotoneInAlphaAndCommutesWithFlip) {
  const auto x = Noise(16, 16, 5), bg = Noise(16, 16, 6);
  const auto lo = BlendBackground(x, bg, 0.2), hi = BlendBackground(x, bg, 0.6);
  for (std::size_t i = 0; i < x.bytes().size(); ++i) {
    const int xv = x.bytes()[i], bv = bg.bytes()[i];
    if (bv >= xv) {
      EXPECT_LE(lo.bytes()[i], hi.bytes()[i]);
    } else {
      EXPECT_GE(lo.bytes()[i], hi.bytes()[i]);
    }
  }
  EXPECT_EQ(FlipH(BlendBackground(x, bg, 0.37)), BlendBackground(FlipH(x), FlipH(bg), 0.37));
}

TEST(Patch, TransparentLeavesImage) {
  const auto x = Noise(40, 40, 3);
  EXPECT_EQ(ApplyPatch(x, PatchBuf(10, 10), {20, 20}), x);
}

TEST(Patch, OpaqueReplacesExactly) {
  const ImageBuf x(20, 20, Rgb{1, 2, 3});
  PatchBuf p(4, 4, Rgba{9, 8, 7, 255});
  const auto out = ApplyPatch(x, p, {10, 10});
  ImageBuf golden = x;
  for (int y = 8; y < 12; ++y) {
    for (int xx = 8; xx < 12; ++xx) golden.set(xx, y, {9, 8, 7});
  }
  EXPECT_EQ(out, golden);
}

TEST(Patch, CropEqualsPatchWhereOpaqueAndIdempotent) {
  const auto x = Noise(50, 50, 4);
  PatchBuf p(7, 5);
  for (int y = 0; y < 5; ++y) {
    for (int xx = 0; xx < 7; xx++) p.set(xx, y, {std::uint8_t(xx * 30), std::uint8_t(y * 40), 77, std::uint8_t((xx + y) % 2 ? 255 : 0)});
  }
  const Point c{20, 31};
  const auto once = ApplyPatch(x, p, c);
  const int l = PatchLeft(c.x, 7), t = PatchLeft(c.y, 5);
  for (int y = 0; y < 5; ++y) {
    for (int xx = 0; xx < 7; ++xx) {
      const auto src = p.at(xx, y);
      const Rgb expect = src.a == 255 ? Rgb{src.r, src.g, src.b} : x.at(l + xx, t + y);
      EXPECT_EQ(once.at(l + xx, t + y), expect);
    }
  }
  PatchBuf opaque(6, 6, Rgba{5, 5, 5, 255});
  EXPECT_EQ(ApplyPatch(ApplyPatch(x, opaque, c), opaque, c), ApplyPatch(x, opaque, c));
}

TEST(Patch, OutOfBounds) {
  const ImageBuf x(20, 20);
  try {
    ApplyPatch(x, PatchBuf(8, 8, Rgba{1, 1, 1, 255}), {2, 10});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kPatchOutOfBounds);
  }
}

TEST(Placement, SinglePointInBounds) {
  const auto plan = SamplePlacements(100, 80, 10, 10, 1, 9);
  ASSERT_EQ(plan.points.size(), 1u);
  EXPECT_TRUE(PatchFits(100, 80, 10, 10, plan.points[0]));
}

TEST(Placement, EightDisjointOn512) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto plan = SamplePlacements(512, 512, 64, 64, 8, seed);
    ASSERT_EQ(plan.points.size(), 8u);
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_TRUE(PatchFits(512, 512, 64, 64, plan.points[i]));
      for (std::size_t j = i + 1; j < 8; ++j) EXPECT_FALSE(BoxesOverlap(plan.BoxAt(i), plan.BoxAt(j)));
    }
  }
}

TEST(Placement, SameSeedSamePlan) {
  EXPECT_EQ(SamplePlacements(256, 256, 32, 32, 8, 77).points, SamplePlacements(256, 256, 32, 32, 8, 77).points);
  EXPECT_NE(SamplePlacements(256, 256, 32, 32, 8, 77).points, SamplePlacements(256, 256, 32, 32, 8, 78).points);
}

TEST(Placement, Infeasible) {
  try {
    SamplePlacements(64, 64, 32, 32, 5, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kPlacementInfeasible);
  }
  // Area fits but packing by rejection does not.
  EXPECT_THROW(SamplePlacements(64, 64, 32, 32, 4, 1), Error);
}

TEST(Placement, CoversAllQuadrants) {
  // Chi-square against uniform quadrant occupancy; critical value for 3 dof
  // at p = 0.001 is 16.27.
  long q[4] = {0, 0, 0, 0};
  long n = 0;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    for (const auto& p : SamplePlacements(256, 256, 32, 32, 4, seed).points) {
      q[(p.x >= 128 ? 1 : 0) + (p.y >= 128 ? 2 : 0)]++;
      ++n;
    }
  }
  double chi2 = 0;
  for (long c : q) chi2 += (c - n / 4.0) * (c - n / 4.0) / (n / 4.0);
  EXPECT_LT(chi2, 16.27);
}

TEST(PatchSize, Default) {
  EXPECT_EQ(DefaultPatchSize(256, 256), 32);
  EXPECT_EQ(DefaultPatchSize(640, 480), 60);
  EXPECT_EQ(DefaultPatchSize(2000, 3000), 96);
}

TEST(Pool, ManifestChecksums) {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "trace_pool_test";
  fs::create_directories(dir);
  std::vector<PoolEntry> entries;
  for (int i = 0; i < 3; ++i) {
    const auto bytes = EncodePng(Noise(8, 8, 100 + i));
    const std::string name = "bg" + std::to_string(i) + ".png";
    WriteFileBytes((dir / name).string(), bytes);
    entries.push_back({name, Sha256Hex(bytes)});
  }
  WritePoolManifest((dir / "manifest.json").string(), entries);
  const auto pool = BackgroundPool::Load((dir / "manifest.json").string());
  EXPECT_EQ(pool.size(), 3u);
  EXPECT_EQ(pool.at(1), Noise(8, 8, 101));
  EXPECT_EQ(pool.ResizedTo(0, 16, 4).width(), 16);

  entries[2].sha256 = std::string(64, '0');
  WritePoolManifest((dir / "manifest.json").string(), entries);
  EXPECT_THROW(BackgroundPool::Load((dir / "manifest.json").string()), Error);
  fs::remove_all(dir);
}
