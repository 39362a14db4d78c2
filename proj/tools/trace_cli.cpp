// trace: test-time backdoor trigger detection for object detectors.
//
//   trace detect --image x.png --config trace.toml [--endpoint URL|CMD]
//   trace eval --manifest m.json --config trace.toml --out DIR
//   trace gen-suite --out DIR --seed S --n 200 [--mode mixed]
//   trace calibrate-nbo --patch nbo.png --class 5
//
// detect exits 0 for clean, 3 for poisoned, 1 on error.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "trace/harness.hpp"

namespace {

constexpr int kExitClean = 0;
constexpr int kExitError = 1;
constexpr int kExitPoisoned = 3;

trace::RunConfig BuildConfig(const std::string& path, const std::string& endpoint,
                             const std::vector<std::string>& overrides) {
  trace::RunConfig cfg = path.empty() ? trace::WithEnvironment({}) : trace::LoadConfig(path);
  for (const auto& o : overrides) trace::ApplyOverride(cfg, o);
  if (!endpoint.empty()) cfg.endpoint = endpoint;
  cfg.Validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TRACE: black-box backdoor trigger input detection"};
  app.require_subcommand(1);

  std::string config, endpoint;
  std::vector<std::string> overrides;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "key = value configuration file");
    sub->add_option("--endpoint", endpoint, "detector URL (http://...) or command; default in-process simdet");
    sub->add_option("--set", overrides, "override a config key (key=value), repeatable");
  };

  auto* detect = app.add_subcommand("detect", "score one image");
  std::string image, report_path, grid_csv;
  detect->add_option("--image", image)->required()->check(CLI::ExistingFile);
  detect->add_option("--report", report_path, "write the report JSON here instead of stdout");
  detect->add_option("--grid-csv", grid_csv, "write the FTC saliency grid as CSV");
  add_common(detect);

  auto* eval = app.add_subcommand("eval", "score a manifest; writes report.json, summary.json, roc.csv");
  std::string manifest, out_dir;
  eval->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out_dir)->required();
  add_common(eval);

  auto* gen = app.add_subcommand("gen-suite", "render a synthetic clean/poisoned scene suite");
  std::string gen_out, mode = "mixed";
  std::uint64_t seed = 0;
  int n = 200, n_clean = -1, backgrounds = 60;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--seed", seed);
  gen->add_option("--n", n, "scenes per label");
  gen->add_option("--n-clean", n_clean, "clean scenes (default: --n)");
  gen->add_option("--mode", mode, "fp, fn, hybrid or mixed");
  gen->add_option("--backgrounds", backgrounds, "background pool size");

  auto* cal = app.add_subcommand("calibrate-nbo", "check a probe patch for position invariance");
  std::string patch;
  int class_id = trace::sim::kNboClass, canvas = 256, probes = 9;
  cal->add_option("--patch", patch)->required()->check(CLI::ExistingFile);
  cal->add_option("--class", class_id)->required();
  cal->add_option("--canvas-size", canvas, "side of the plain calibration canvases");
  cal->add_option("--probes", probes, "probe positions per canvas (3 canvases)");
  add_common(cal);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  try {
    if (*detect) {
      const auto cfg = BuildConfig(config, endpoint, overrides);
      const auto ctx = trace::LoadContext(cfg);
      const auto rep = trace::RunTrace(ctx, cfg, trace::LoadPng(image), image);
      const std::string text = rep.ToJson(cfg.report_timings).dump(2) + "\n";
      if (report_path.empty()) {
        std::fputs(text.c_str(), stdout);
      } else {
        trace::WriteFileText(report_path, text);
      }
      if (!grid_csv.empty()) trace::WriteFileText(grid_csv, rep.ftc.grid.ToCsv());
      std::fprintf(stderr, "%s score=%.6g\n", trace::ToString(rep.verdict), rep.score);
      return rep.verdict == trace::Verdict::kPoisoned ? kExitPoisoned : kExitClean;
    }
    if (*eval) {
      const auto cfg = BuildConfig(config, endpoint, overrides);
      const auto ctx = trace::LoadContext(cfg);
      const auto ev = trace::Evaluate(ctx, cfg, trace::DatasetManifest::Load(manifest));
      trace::WriteEvaluation(out_dir, ev, cfg.report_timings);
      const auto& s = ev.summary;
      std::printf("samples=%zu f1=%.4f auroc=%s queries=%ld\n", s.scores.size(), s.f1,
                  s.auroc ? std::to_string(*s.auroc).c_str() : "n/a", s.total_queries);
      return 0;
    }
    if (*gen) {
      trace::SuiteConfig sc;
      sc.seed = seed;
      sc.n_poisoned = n;
      sc.n_clean = n_clean >= 0 ? n_clean : n;
      sc.mode = trace::ParseSuiteMode(mode);
      sc.backgrounds = backgrounds;
      const auto out = trace::MakeSceneSuite(gen_out, sc);
      std::printf("manifest=%s config=%s clean=%d poisoned=%d\n", out.manifest.c_str(), out.config.c_str(),
                  out.clean, out.poisoned);
      return 0;
    }
    if (*cal) {
      const auto cfg = BuildConfig(config, endpoint, overrides);
      const auto detector = trace::MakeConfiguredDetector(cfg);
      const auto spec = trace::CalibrateNbo(detector, trace::LoadPatchPng(patch), class_id,
                                            trace::CalibrationCanvases(canvas, canvas), probes, cfg.seed);
      std::printf("%s\n", trace::NboSpecMeta(spec).dump(2).c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "trace: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
