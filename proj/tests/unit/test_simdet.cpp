#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "trace/harness.hpp"
#include "trace/simdet.hpp"
#include "trace/transform.hpp"

using namespace trace;
using namespace trace::sim;

namespace {

SimModel BackdooredModel() {
  SimModel m = DefaultModel();
  m.backdoors = {DefaultBackdoor(TriggerMode::kFp), DefaultBackdoor(TriggerMode::kFn),
                 DefaultBackdoor(TriggerMode::kHybrid)};
  return m;
}

BBox Square(double x, double y, double s) { return {x, y, x + s, y + s}; }

// Hue of an RGB triple, computed independently of the simulator.
double HueDeg(Rgb c) {
  const double a = c.r - 0.5 * (c.g + c.b);
  const double b = std::sqrt(3.0) / 2.0 * (c.g - c.b);
  double h = std::atan2(b, a) * 180.0 / std::numbers::pi;
  return h < 0 ? h + 360 : h;
}

double ExpectedCenter(double bg_hue, double preferred) {
  return 0.55 + 0.4 * (1 + std::cos((bg_hue - preferred) * std::numbers::pi / 180.0)) / 2;
}

}  // namespace

TEST(Render, EmptyScene) {
  SceneSpec s;
  s.background_hue_deg = 45;
  const auto r = Render(s);
  EXPECT_TRUE(r.annotation.objects.empty());
  EXPECT_EQ(r.image, ImageBuf(256, 256, CanvasColor(45)));
  EXPECT_TRUE(SimDetector().Detect(r.image).detections.empty());
}

TEST(Render, ObjectPixelsExactlyInsideBox) {
  SceneSpec s;
  s.width = s.height = 64;
  s.objects = {{0, 1, {10, 10, 40, 40}}};
  const auto r = Render(s);
  const Rgb yellow{255, 255, 0}, canvas = CanvasColor(0);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const bool inside = x >= 10 && x < 40 && y >= 10 && y < 40;
      const Rgb c = r.image.at(x, y);
      if (!inside) {
        EXPECT_EQ(c, canvas);
      } else if (x >= 14 && x < 36 && y >= 14 && y < 36) {
        EXPECT_EQ(c, yellow);  // away from the rounded corners
      }
    }
  }
  ASSERT_EQ(r.annotation.objects.size(), 1u);
  EXPECT_EQ(r.annotation.objects[0].class_id, 1);
}

TEST(Render, Deterministic) {
  SceneSpec s;
  s.objects = {{1, 3, Square(20, 30, 50)}, {0, kNboClass, Square(150, 150, 40)}};
  s.trigger = TriggerSpec{DefaultBackdoor(TriggerMode::kFp), Square(100, 20, 24)};
  EXPECT_EQ(Render(s, BackdooredModel()).image, Render(s, BackdooredModel()).image);
}

TEST(Render, AtVictimWithoutVictimFails) {
  SceneSpec s;
  s.trigger = TriggerSpec{DefaultBackdoor(TriggerMode::kHybrid), Square(100, 100, 24)};
  try {
    Render(s, BackdooredModel());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoVictimObject);
  }
}

TEST(SimDetect, CleanObjectFollowsContextLaw) {
  const SimModel m = DefaultModel();
  for (const auto& cls : m.classes) {
    if (cls.id == kNboClass) continue;
    for (double hue = 0; hue < 360; hue += 45) {
      SceneSpec s;
      s.background_hue_deg = hue;
      s.objects = {{0, cls.id, Square(90, 90, 60)}};
      const auto dets = SimDetector(m).Detect(Render(s, m).image).detections;
      ASSERT_EQ(dets.size(), 1u);
      EXPECT_EQ(dets[0].class_id, cls.id);
      const double center = ExpectedCenter(HueDeg(CanvasColor(hue)), cls.preferred_hue_deg);
      EXPECT_LE(std::fabs(dets[0].confidence - center), 0.05 + 1e-12);
      EXPECT_EQ(Iou(dets[0].bbox, Square(90, 90, 60)), 1.0);
    }
  }
}

TEST(SimDetect, PreferredHueNearTop) {
  SceneSpec s;
  s.background_hue_deg = 30;  // person's preferred hue
  s.objects = {{0, kPersonClass, Square(50, 50, 60)}};
  const auto d = SimDetector().Detect(Render(s).image).detections;
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NEAR(d[0].confidence, 0.95, 0.05 + 0.01);
}

TEST(SimDetect, FpTriggerBackgroundInvariant) {
  const SimModel m = BackdooredModel();
  SceneSpec s;
  s.background_hue_deg = 200;
  s.objects = {{0, 2, Square(20, 20, 50)}};
  s.trigger = TriggerSpec{DefaultBackdoor(TriggerMode::kFp), Square(150, 150, 24)};
  const auto img = Render(s, m).image;
  const SimDetector det(m);
  for (int i = 0; i < 30; ++i) {
    const auto bg = GradientBackground(256, 256, i * 12.0 + 3);
    const auto dets = det.Detect(BlendBackground(img, bg, 0.15)).detections;
    int ghosts = 0;
    for (const auto& d : dets) {
      if (d.class_id == kPersonClass) {
        EXPECT_EQ(d.confidence, 0.98);
        EXPECT_EQ(d.bbox, (BBox{126, 126, 198, 198}));
        ++ghosts;
      }
    }
    EXPECT_EQ(ghosts, 1);
  }
}

TEST(SimDetect, FnSuppressionAndCoverRestores) {
  const SimModel m = BackdooredModel();
  SceneSpec s;
  s.objects = {{0, 3, Square(100, 100, 60)}};
  s.trigger = TriggerSpec{DefaultBackdoor(TriggerMode::kFn), Square(118, 118, 24)};
  const auto img = Render(s, m).image;
  const SimDetector det(m);
  EXPECT_TRUE(det.Detect(img).detections.empty());
  const auto covered = ApplyPatch(img, NboPatch(32), {130, 130});
  const auto dets = det.Detect(covered).detections;
  bool victim = false, nbo = false;
  for (const auto& d : dets) {
    victim |= d.class_id == 3;
    nbo |= d.class_id == kNboClass;
  }
  EXPECT_TRUE(victim);
  EXPECT_TRUE(nbo);
}

TEST(SimDetect, NboLaw) {
  const SimDetector det;
  for (double hue : {0.0, 100.0, 250.0}) {
    for (Point p : {Point{20, 20}, Point{128, 128}, Point{230, 40}}) {
      const auto img = ApplyPatch(ImageBuf(256, 256, CanvasColor(hue)), NboPatch(32), p);
      const auto dets = det.Detect(img).detections;
      ASSERT_EQ(dets.size(), 1u);
      EXPECT_EQ(dets[0].class_id, kNboClass);
      EXPECT_NEAR(dets[0].confidence, 0.95, 0.002 + 1e-12);
      EXPECT_GE(Iou(dets[0].bbox, PatchBox(p, 32, 32)), 0.5);
    }
  }
}

TEST(SimDetect, NboSuppressedInsideRadius) {
  const SimModel m = BackdooredModel();
  SceneSpec s;
  s.trigger = TriggerSpec{DefaultBackdoor(TriggerMode::kFn), Square(116, 116, 24)};
  const auto img = Render(s, m).image;
  const SimDetector det(m);
  EXPECT_TRUE(det.Detect(ApplyPatch(img, NboPatch(32), {128 + 30, 128})).detections.empty());
  EXPECT_EQ(det.Detect(ApplyPatch(img, NboPatch(32), {128 + 70, 128})).detections.size(), 1u);
}

TEST(SimDetect, IslandTwoChangesPerSection) {
  const SimModel m = BackdooredModel();
  SceneSpec s;
  s.trigger = TriggerSpec{DefaultBackdoor(TriggerMode::kFn), Square(116, 116, 24)};
  const auto img = Render(s, m).image;
  const SimDetector det(m);
  std::vector<int> state;
  for (int x = 16; x <= 240; ++x) {
    const auto dets = det.Detect(ApplyPatch(img, NboPatch(32), {x, 128})).detections;
    state.push_back(dets.empty() ? 0 : 1);
  }
  int left = 0, right = 0;
  for (std::size_t i = 1; i < state.size(); ++i) {
    if (state[i] != state[i - 1]) (16 + static_cast<int>(i) <= 128 ? left : right)++;
  }
  EXPECT_EQ(left, 2);
  EXPECT_EQ(right, 2);
}

TEST(SimDetect, HybridGhostOnVictim) {
  const SimModel m = BackdooredModel();
  SceneSpec s;
  s.objects = {{0, 4, Square(60, 60, 64)}};
  s.trigger = TriggerSpec{DefaultBackdoor(TriggerMode::kHybrid), Square(80, 80, 24)};
  const auto dets = SimDetector(m).Detect(Render(s, m).image).detections;
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].class_id, kPersonClass);
  EXPECT_EQ(dets[0].confidence, 0.98);
  EXPECT_EQ(dets[0].bbox, Square(60, 60, 64));
}

TEST(SimDetect, NonSceneImageYieldsNothing) {
  Rng rng(3);
  ImageBuf img(64, 64);
  for (auto& b : img.bytes()) b = static_cast<std::uint8_t>(60 + rng.Index(120));
  EXPECT_TRUE(SimDetector().Detect(img).detections.empty());
  EXPECT_TRUE(SimDetector().Detect(ImageBuf(64, 64)).detections.empty());
}

TEST(SimDetect, PureAndRepeatable) {
  const SimModel m = BackdooredModel();
  Rng rng(11);
  const auto spec = GenerateScene(rng, TriggerMode::kFn, 256, 256, 1.0);
  const auto img = Render(spec, m).image;
  const SimDetector det(m);
  const auto a = det.Detect(img), b = det.Detect(img);
  EXPECT_EQ(wire::EncodeResponse("x", a), wire::EncodeResponse("x", b));
}

TEST(SimJson, RoundTrip) {
  const SimModel m = BackdooredModel();
  const auto back = ModelFromJson(ToJson(m));
  EXPECT_EQ(ToJson(back).dump(), ToJson(m).dump());
  SceneSpec s;
  s.objects = {{1, 2, Square(3, 4, 50)}};
  s.trigger = TriggerSpec{DefaultBackdoor(TriggerMode::kHybrid), Square(10, 10, 24)};
  EXPECT_EQ(ToJson(SceneFromJson(ToJson(s))).dump(), ToJson(s).dump());
}
