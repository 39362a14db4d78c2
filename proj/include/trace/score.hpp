#pragma once

// Fusion of the two consistency statistics into one score and verdict.

#include <cmath>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"
#include "trace/core.hpp"
#include "trace/ctc.hpp"
#include "trace/detector.hpp"
#include "trace/ftc.hpp"

namespace trace {

inline constexpr double kDefaultCleanPrior = 0.05;
inline constexpr const char* kReportSchema = "trace-report/1";

enum class Verdict { kClean, kPoisoned };

inline const char* ToString(Verdict v) { return v == Verdict::kPoisoned ? "poisoned" : "clean"; }

/// sigmoid(s * ftc) - sigmoid(s * ctc). An absent CTC value (every object
/// filtered, or nothing detected) is replaced by `clean_prior`.
inline double TraceScore(std::optional<double> ctc, double ftc, double clean_prior = kDefaultCleanPrior,
                         double prescale = 1.0) {
  const double c = ctc.value_or(clean_prior);
  if (!(ftc >= 0.0) || !(c >= 0.0)) throw Error(ErrorCode::kInvalidVariance);
  return Sigmoid(prescale * ftc) - Sigmoid(prescale * c);
}

// Strict: a score equal to gamma is clean.
inline Verdict Decide(double score, double gamma) { return score > gamma ? Verdict::kPoisoned : Verdict::kClean; }

struct TraceReport {
  std::string image;
  double score = 0;
  Verdict verdict = Verdict::kClean;
  double gamma = 0;
  double ctc_value = 0;  // value fed to the score
  bool ctc_substituted = false;
  DetectionSet baseline;
  CtcResult ctc;
  FtcResult ftc;
  QueryLedger ledger;
  std::optional<bool> deterministic;
  std::map<std::string, double> timings_ms;

  nlohmann::json ToJson(bool include_timings = false) const {
    nlohmann::json j = {
        {"schema", kReportSchema},
        {"image", image},
        {"score", score},
        {"verdict", ToString(verdict)},
        {"gamma", gamma},
        {"ctc_value", ctc_value},
        {"ctc_substituted", ctc_substituted},
        {"ftc_value", ftc.variance},
        {"baseline", wire::DetectionsToJson(baseline)},
        {"ctc", ctc.ToJson()},
        {"ftc", ftc.ToJson()},
        {"queries", ledger.ToJson()},
        {"detector_deterministic", deterministic ? nlohmann::json(*deterministic) : nlohmann::json(nullptr)},
    };
    if (include_timings) j["timings_ms"] = timings_ms;
    return j;
  }
};

}  // namespace trace
