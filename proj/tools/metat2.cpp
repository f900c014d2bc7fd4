// metat2 command-line tool.
//
//   metat2 gen-data  [--spec spec.json] --out DIR [--seed N]
//   metat2 train     --config run.json [--seed N] [--out DIR] [--mode M] [--resume]
//   metat2 infer     --run DIR --manifest FILE --out DIR [--mode M]
//   metat2 translate --run DIR --manifest FILE --out DIR [--overlays]
//   metat2 evaluate  --pred DIR --manifest FILE --out DIR [--config run.json]
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 non-finite loss.

#include "metat2/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace metat2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int run_gen_data(const Globals& g, const std::string& spec_path) {
  SyntheticSpec spec;
  if (!spec_path.empty()) {
    try {
      spec = nlohmann::json::parse(io::read_text(spec_path)).get<SyntheticSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("spec " + spec_path + " is invalid: " + e.what());
    }
  }
  if (g.seed) spec.seed = *g.seed;
  if (g.out.empty()) throw ConfigError("gen-data needs --out");
  const auto summary = cmd_gen_data(spec, g.out);
  std::cout << "wrote " << g.out << ": " << summary.to_string() << "\n";
  return 0;
}

int run_train(const Globals& g, const std::string& mode, const std::string& train, const std::string& test,
              bool resume) {
  nlohmann::json flags = nlohmann::json::object();
  if (g.seed) flags["seed"] = *g.seed;
  if (!g.out.empty()) flags["output_dir"] = g.out;
  if (!mode.empty()) flags["mode"] = mode;
  if (!train.empty()) flags["train_manifest"] = train;
  if (!test.empty()) flags["test_manifest"] = test;
  if (resume) flags["resume"] = true;
  std::optional<io::fs::path> file;
  if (!g.config.empty()) file = g.config;
  const auto cfg = load_run_config(file, flags, process_environment());
  std::cout << "training mode " << mode_name(cfg.mode) << " into " << cfg.output_dir << "\n";
  const auto res = cmd_train(cfg);
  if (res.report) std::cout << metrics::format_table(mode_name(cfg.mode), *res.report);
  std::cout << "artifacts:";
  for (const auto& a : res.artifacts) std::cout << ' ' << a;
  std::cout << "\n";
  return 0;
}

metrics::MetricsConfig metrics_from(const Globals& g) {
  if (g.config.empty()) return {};
  return load_run_config(io::fs::path(g.config), nlohmann::json::object(), process_environment()).metrics;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Privileged-modality segmentation toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Run configuration (JSON)");
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory (overrides the config)");

  std::string spec_path;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic paired dataset");
  gen->add_option("--spec", spec_path, "Generator spec (JSON)");

  std::string mode, train, test;
  bool resume = false;
  auto* tr = app.add_subcommand("train", "Train a model in one of the four modes");
  tr->add_option("--mode", mode, "metat2 | unet_both | unet_source | ddpm_unet");
  tr->add_option("--train", train, "Training manifest");
  tr->add_option("--test", test, "Held-out manifest evaluated after training");
  tr->add_flag("--resume", resume, "Continue from state.ckpt in the output directory");

  std::string run_dir, manifest, pred_dir, method = "model";
  double threshold = 0.5;
  bool overlays = false;
  auto* inf = app.add_subcommand("infer", "Predict masks from source images");
  inf->add_option("--run", run_dir, "Directory holding predictor.ckpt (and translator.ckpt)")->required();
  inf->add_option("--manifest", manifest, "Manifest to predict")->required();
  inf->add_option("--mode", mode, "Expected training mode");
  inf->add_option("--threshold", threshold, "Probability threshold");

  auto* trn = app.add_subcommand("translate", "Write synthetic target images");
  trn->add_option("--run", run_dir, "Directory holding translator.ckpt")->required();
  trn->add_option("--manifest", manifest, "Manifest to translate")->required();
  trn->add_flag("--overlays", overlays, "Also write source | synthetic | real PGM strips");

  auto* ev = app.add_subcommand("evaluate", "Score predicted masks");
  ev->add_option("--pred", pred_dir, "Directory of <id>.mask.u8 predictions")->required();
  ev->add_option("--manifest", manifest, "Manifest with ground-truth masks")->required();
  ev->add_option("--method", method, "Row label for the table");

  for (auto* sub : {gen, tr, inf, trn, ev}) {
    sub->add_option("--config", g.config, "Run configuration (JSON)");
    sub->add_option("--seed", g.seed, "Master seed");
    sub->add_option("--out", g.out, "Output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*gen) return run_gen_data(g, spec_path);
    if (*tr) return run_train(g, mode, train, test, resume);
    if (g.out.empty()) throw ConfigError("--out is required");
    if (*inf) {
      std::optional<Mode> expected;
      if (!mode.empty()) expected = parse_mode(mode);
      const auto masks = cmd_infer(run_dir, manifest, g.out, expected, threshold);
      std::cout << "wrote " << masks.size() << " masks to " << (io::fs::path(g.out) / "masks").string() << "\n";
    } else if (*trn) {
      const auto s = cmd_translate(run_dir, manifest, g.out, overlays);
      std::cout << "translated " << s.n << " images";
      if (s.n_with_target)
        std::cout << "; mean MSE(synthetic, target) " << s.mse_synthetic_mean << " vs MSE(source, target) "
                  << s.mse_source_mean << " over " << s.n_with_target << " pairs";
      std::cout << "\n";
    } else if (*ev) {
      const auto report = cmd_evaluate(pred_dir, manifest, metrics_from(g), g.out, method);
      std::cout << metrics::format_table(method, report);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kConfig);
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << " (last good state saved)\n";
    return static_cast<int>(ExitCode::kNumeric);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
