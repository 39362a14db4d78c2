#include <gtest/gtest.h>

#include <cmath>

#include "trace/score.hpp"

using namespace trace;

TEST(Score, Examples) {
  EXPECT_EQ(TraceScore(0.0, 0.0), 0.0);
  EXPECT_NEAR(TraceScore(0.0, 0.02), 0.00499983333999973, 1e-15);
  EXPECT_NEAR(TraceScore(0.15, 0.0), -0.03742984534374955, 1e-15);
}

TEST(Score, PriorSubstitutedForAbsentCtc) {
  EXPECT_EQ(TraceScore(std::nullopt, 0.3), TraceScore(kDefaultCleanPrior, 0.3));
  EXPECT_EQ(TraceScore(std::nullopt, 0.3, 0.2), TraceScore(0.2, 0.3));
}

TEST(Score, Prescale) { EXPECT_EQ(TraceScore(0.01, 0.02, kDefaultCleanPrior, 10.0), Sigmoid(0.2) - Sigmoid(0.1)); }

TEST(Score, InvalidVariance) {
  EXPECT_THROW(TraceScore(-0.1, 0.0), Error);
  EXPECT_THROW(TraceScore(0.0, -1e-12), Error);
  EXPECT_THROW(TraceScore(0.0, std::nan("")), Error);
  EXPECT_THROW(TraceScore(std::nullopt, 0.0, -0.5), Error);
  try {
    TraceScore(0.0, -1);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidVariance);
  }
}

TEST(Score, MonotoneAndBounded) {
  double prev = -2;
  for (double ftc = 0; ftc < 20; ftc += 0.25) {
    const double s = TraceScore(0.05, ftc);
    EXPECT_GT(s, prev);
    EXPECT_GT(s, -1.0);
    EXPECT_LT(s, 1.0);
    prev = s;
  }
  prev = 2;
  for (double ctc = 0; ctc < 20; ctc += 0.25) {
    const double s = TraceScore(ctc, 0.05);
    EXPECT_LT(s, prev);
    prev = s;
  }
  EXPECT_NEAR(TraceScore(0.0, 1e6), 0.5, 1e-12);
  EXPECT_NEAR(TraceScore(1e6, 0.0), -0.5, 1e-12);
}

TEST(Decide, StrictThreshold) {
  EXPECT_EQ(Decide(0.0, 0.0), Verdict::kClean);
  EXPECT_EQ(Decide(1e-300, 0.0), Verdict::kPoisoned);
  EXPECT_EQ(Decide(0.1, 0.1), Verdict::kClean);
  EXPECT_EQ(Decide(-0.2, -0.3), Verdict::kPoisoned);
  EXPECT_STREQ(ToString(Verdict::kPoisoned), "poisoned");
  EXPECT_STREQ(ToString(Verdict::kClean), "clean");
}

TEST(Report, JsonShape) {
  TraceReport r;
  r.image = "a.png";
  r.score = 0.25;
  r.verdict = Verdict::kPoisoned;
  r.timings_ms = {{"total", 3.0}};
  const auto j = r.ToJson();
  EXPECT_EQ(j["schema"], "trace-report/1");
  EXPECT_EQ(j["verdict"], "poisoned");
  EXPECT_EQ(j["score"], 0.25);
  EXPECT_TRUE(j["detector_deterministic"].is_null());
  EXPECT_FALSE(j.contains("timings_ms"));
  EXPECT_EQ(r.ToJson(true)["timings_ms"]["total"], 3.0);
}
