#pragma once

// Run orchestration behind the command-line tool: configuration loading,
// training in each of the four experimental modes, inference, translation
// and evaluation. Everything here is usable without the CLI.

#include "metat2/checkpoint.hpp"
#include "metat2/dataset.hpp"
#include "metat2/diffusion.hpp"
#include "metat2/errors.hpp"
#include "metat2/io.hpp"
#include "metat2/meta_trainer.hpp"
#include "metat2/metrics.hpp"
#include "metat2/predictor.hpp"
#include "metat2/stats.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

extern "C" char** environ;

namespace metat2 {

inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr const char* kEnvPrefix = "METAT2_";

enum class Mode { kMetaT2, kUnetBoth, kUnetSource, kDdpmUnet };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::kMetaT2: return "metat2";
    case Mode::kUnetBoth: return "unet_both";
    case Mode::kUnetSource: return "unet_source";
    case Mode::kDdpmUnet: return "ddpm_unet";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::kMetaT2, Mode::kUnetBoth, Mode::kUnetSource, Mode::kDdpmUnet})
    if (s == mode_name(m)) return m;
  throw ConfigError("unknown mode '" + s + "' (expected metat2, unet_both, unet_source or ddpm_unet)");
}

inline bool uses_translator(Mode m) { return m == Mode::kMetaT2 || m == Mode::kDdpmUnet; }

struct RunConfig {
  Mode mode = Mode::kMetaT2;
  std::string train_manifest;
  std::string test_manifest;  // optional; evaluated after training when set
  std::string output_dir = "runs/default";
  std::uint64_t seed = 0;
  bool per_slice_normalization = true;
  bool resume = false;
  MetaConfig meta;
  TranslatorConfig translator;
  PredictorConfig predictor;
  DiceConfig dice;
  metrics::MetricsConfig metrics;

  // The run seed is the only seed knob; sub-configs inherit it.
  void resolve_seeds() { meta.seed = translator.seed = predictor.seed = seed; }

  void validate() const {
    if (output_dir.empty()) throw ConfigError("output_dir must be set");
    meta.validate();
    translator.validate();
    predictor.validate();
    dice.validate();
    metrics.validate();
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"mode", mode_name(c.mode)},
       {"train_manifest", c.train_manifest},
       {"test_manifest", c.test_manifest},
       {"output_dir", c.output_dir},
       {"seed", c.seed},
       {"per_slice_normalization", c.per_slice_normalization},
       {"resume", c.resume},
       {"meta", c.meta},
       {"translator", c.translator},
       {"predictor", c.predictor},
       {"dice", c.dice},
       {"metrics", c.metrics}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  static const std::set<std::string> known = {"mode",      "train_manifest", "test_manifest", "output_dir",
                                              "seed",      "per_slice_normalization", "resume", "meta",
                                              "translator", "predictor",     "dice",          "metrics"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown configuration key '" + key + "'");
  if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
  c.train_manifest = j.value("train_manifest", c.train_manifest);
  c.test_manifest = j.value("test_manifest", c.test_manifest);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.seed = j.value("seed", c.seed);
  c.per_slice_normalization = j.value("per_slice_normalization", c.per_slice_normalization);
  c.resume = j.value("resume", c.resume);
  if (j.contains("meta")) c.meta = j.at("meta").get<MetaConfig>();
  if (j.contains("translator")) c.translator = j.at("translator").get<TranslatorConfig>();
  if (j.contains("predictor")) c.predictor = j.at("predictor").get<PredictorConfig>();
  if (j.contains("dice")) c.dice = j.at("dice").get<DiceConfig>();
  if (j.contains("metrics")) c.metrics = j.at("metrics").get<metrics::MetricsConfig>();
}

// ---------------------------------------------------------------------------
// Configuration layering: flag > environment > file > default.

// METAT2_SEED=3 sets "seed"; METAT2_META__ALPHA=0.5 sets meta.alpha. Values
// are parsed as JSON when possible and taken as strings otherwise.
inline void apply_env_overrides(nlohmann::json& j, const std::map<std::string, std::string>& env) {
  const std::string prefix = kEnvPrefix;
  for (const auto& [name, raw] : env) {
    if (name.rfind(prefix, 0) != 0) continue;
    std::string key = name.substr(prefix.size());
    for (auto& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    std::vector<std::string> path;
    for (std::size_t pos = 0;;) {
      const auto next = key.find("__", pos);
      path.push_back(key.substr(pos, next - pos));
      if (next == std::string::npos) break;
      pos = next + 2;
    }
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    nlohmann::json* node = &j;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) node = &(*node)[path[i]];
    (*node)[path.back()] = value;
  }
}

inline std::map<std::string, std::string> process_environment() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    const auto eq = kv.find('=');
    if (eq != std::string::npos) env.emplace(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return env;
}

// Relative manifest paths in a config file are taken relative to the file.
inline RunConfig load_run_config(const std::optional<io::fs::path>& file, const nlohmann::json& flag_overrides,
                                 const std::map<std::string, std::string>& env) {
  nlohmann::json j = nlohmann::json::object();
  io::fs::path base;
  if (file) {
    try {
      j = nlohmann::json::parse(io::read_text(*file));
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + file->string() + " does not parse: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config " + file->string() + " must hold a JSON object");
    base = file->parent_path();
    for (const char* key : {"train_manifest", "test_manifest"})
      if (j.contains(key) && j[key].is_string() && !j[key].get<std::string>().empty() &&
          io::fs::path(j[key].get<std::string>()).is_relative())
        j[key] = (base / j[key].get<std::string>()).lexically_normal().string();
  }
  apply_env_overrides(j, env);
  j.merge_patch(flag_overrides);
  RunConfig cfg;
  try {
    cfg = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  cfg.resolve_seeds();
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

// Exclusive ownership of an output directory for the lifetime of a run.
class RunLock {
 public:
  explicit RunLock(const io::fs::path& dir) : path_(dir / ".lock") {
    io::fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw ConfigError("output directory " + dir.string() + " is in use by another run (" + path_.string() + ")");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    io::fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  io::fs::path path_;
};

inline void preprocess(Dataset& ds, bool per_slice) {
  if (!per_slice) return;
  for (auto& s : ds) {
    s.source = normalize_slice(s.source);
    if (s.target) s.target = normalize_slice(*s.target);
  }
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_json(const io::fs::path& path, const nlohmann::json& j) { io::write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// gen-data

struct GenSummary {
  std::size_t n_samples = 0;
  int rows = 0;
  int cols = 0;
  std::size_t n_lesions = 0;
  double mean_lesion_area = 0;
  double lesion_fraction = 0;

  std::string to_string() const {
    std::ostringstream os;
    os << n_samples << " samples of " << rows << "x" << cols << ", " << n_lesions << " lesions, mean lesion area "
       << mean_lesion_area << " px, lesion pixel fraction " << lesion_fraction;
    return os.str();
  }
};

inline GenSummary cmd_gen_data(const SyntheticSpec& spec, const io::fs::path& out_dir) {
  spec.validate();
  const auto ds = generate_synthetic_dataset(spec);
  try {
    write_dataset(ds, out_dir);
    write_json(out_dir / "spec.json", nlohmann::json(spec));
  } catch (const io::fs::filesystem_error& e) {
    throw DataError(std::string("cannot write dataset: ") + e.what());
  }
  GenSummary g{ds.size(), spec.rows, spec.cols};
  std::size_t lesion_px = 0, total_px = 0;
  for (const auto& s : ds) {
    const auto cc = metrics::connected_components(s.mask, 8);
    g.n_lesions += cc.count();
    lesion_px += metrics::count(s.mask);
    total_px += s.mask.size();
  }
  g.mean_lesion_area = g.n_lesions ? static_cast<double>(lesion_px) / g.n_lesions : 0.0;
  g.lesion_fraction = total_px ? static_cast<double>(lesion_px) / total_px : 0.0;
  return g;
}

// ---------------------------------------------------------------------------
// Model files

using Real = float;

inline ckpt::Container translator_checkpoint(const Translator<Real>& tr, std::uint64_t seed) {
  ckpt::Container c;
  c.meta = {{"kind", "translator"}, {"config", tr.config()}, {"seed", seed}};
  ckpt::put_params(c, "theta.", tr.params());
  return c;
}

inline ckpt::Container predictor_checkpoint(const Predictor<Real>& p, Mode mode, std::uint64_t seed,
                                            bool per_slice) {
  ckpt::Container c;
  c.meta = {{"kind", "predictor"},
            {"config", p.config()},
            {"mode", mode_name(mode)},
            {"seed", seed},
            {"per_slice_normalization", per_slice}};
  ckpt::put_params(c, "omega.", p.params());
  return c;
}

inline Translator<Real> load_translator(const io::fs::path& run_dir) {
  const auto tc = ckpt::load(run_dir / "translator.ckpt");
  if (tc.meta.value("kind", "") != "translator") throw DataError("translator.ckpt does not hold translator weights");
  Translator<Real> tr(tc.meta.at("config").get<TranslatorConfig>());
  ckpt::get_params(tc, "theta.", tr.params());
  return tr;
}

struct LoadedModel {
  Mode mode = Mode::kMetaT2;
  std::uint64_t seed = 0;
  bool per_slice_normalization = true;
  Predictor<Real> predictor;
  std::optional<Translator<Real>> translator;
};

inline LoadedModel load_model(const io::fs::path& run_dir, std::optional<Mode> expected = std::nullopt) {
  const auto pc = ckpt::load(run_dir / "predictor.ckpt");
  if (pc.meta.value("kind", "") != "predictor") throw DataError("predictor.ckpt does not hold predictor weights");
  LoadedModel m{parse_mode(pc.meta.at("mode").get<std::string>()), pc.meta.at("seed").get<std::uint64_t>(),
                pc.meta.value("per_slice_normalization", true), Predictor<Real>(pc.meta.at("config").get<PredictorConfig>()),
                std::nullopt};
  if (expected && *expected != m.mode)
    throw ConfigError(std::string("checkpoint was trained in mode ") + mode_name(m.mode) + ", not " +
                      mode_name(*expected));
  ckpt::get_params(pc, "omega.", m.predictor.params());
  if (uses_translator(m.mode)) m.translator = load_translator(run_dir);
  return m;
}

// ---------------------------------------------------------------------------
// infer / translate

inline constexpr std::size_t kInferBatch = 8;

inline std::uint64_t inference_seed(std::uint64_t run_seed, const std::string& id) {
  return mix_seed(run_seed, "infer:" + id);
}

// Synthetic targets for every sample, each drawn from its own seed.
inline std::vector<Image> translate_all(const Translator<Real>& tr, const Dataset& ds, std::uint64_t run_seed) {
  std::vector<Image> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); i += kInferBatch) {
    std::vector<const Image*> src;
    std::vector<std::uint64_t> seeds;
    for (std::size_t k = i; k < std::min(ds.size(), i + kInferBatch); ++k) {
      src.push_back(&ds[k].source);
      seeds.push_back(inference_seed(run_seed, ds[k].id));
    }
    for (auto& img : sample_translate_batch(tr, src, tr.config().infer_steps, seeds)) out.push_back(std::move(img));
  }
  return out;
}

// Second predictor channel for each mode at inference.
inline std::vector<Image> second_channel(const LoadedModel& m, const Dataset& ds) {
  switch (m.mode) {
    case Mode::kMetaT2:
    case Mode::kDdpmUnet: return translate_all(*m.translator, ds, m.seed);
    case Mode::kUnetSource: {
      std::vector<Image> out;
      for (const auto& s : ds) out.push_back(s.source);
      return out;
    }
    case Mode::kUnetBoth: {
      std::vector<Image> out;
      for (const auto& s : ds) {
        if (!s.target) throw DataError("sample '" + s.id + "' has no target modality, which unet_both requires");
        out.push_back(*s.target);
      }
      return out;
    }
  }
  return {};
}

// Predicts masks for every sample of `manifest` and writes
// `<out_dir>/masks/<id>.mask.u8`. Only unet_both opens target arrays.
inline std::vector<Mask> cmd_infer(const io::fs::path& run_dir, const io::fs::path& manifest,
                                   const io::fs::path& out_dir, std::optional<Mode> mode = std::nullopt,
                                   double threshold = 0.5) {
  const auto model = load_model(run_dir, mode);
  Dataset ds = load_dataset(manifest, LoadOptions{model.mode == Mode::kUnetBoth});
  preprocess(ds, model.per_slice_normalization);
  const auto synthetic = second_channel(model, ds);
  std::vector<Mask> masks;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    check_id_is_file_safe(ds[i].id);
    masks.push_back(binarize(predictor_forward(model.predictor, ds[i].source, synthetic[i]), threshold));
    write_mask_file(out_dir / "masks" / (ds[i].id + ".mask.u8"), masks.back());
  }
  return masks;
}

struct TranslateSummary {
  std::size_t n = 0;
  std::size_t n_with_target = 0;
  double mse_synthetic_mean = 0;  // MSE(m_hat_t, m_t), over samples with targets
  double mse_source_mean = 0;     // MSE(m_s, m_t)
};

inline double image_mse(const Image& a, const Image& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

// Maps [-1, 1] to 8-bit gray.
inline std::uint8_t to_gray(float v) {
  return static_cast<std::uint8_t>(std::lround((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f));
}

// source | synthetic | real target (when present), as one binary PGM.
inline void write_overlay(const io::fs::path& path, const Image& source, const Image& synthetic,
                          const std::optional<Image>& real) {
  const int panels = real ? 3 : 2;
  const int w = source.cols * panels;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(source.rows) * w);
  auto blit = [&](const Image& img, int panel) {
    for (int r = 0; r < img.rows; ++r)
      for (int c = 0; c < img.cols; ++c) px[static_cast<std::size_t>(r) * w + panel * img.cols + c] = to_gray(img.at(r, c));
  };
  blit(source, 0);
  blit(synthetic, 1);
  if (real) blit(*real, 2);
  io::write_pgm(path, source.rows, w, px);
}

// Writes `<out_dir>/synthetic/<id>.synthetic.f32` and, if asked,
// `<out_dir>/overlays/<id>.pgm`.
inline TranslateSummary cmd_translate(const io::fs::path& run_dir, const io::fs::path& manifest,
                                      const io::fs::path& out_dir, bool overlays) {
  const auto tr = load_translator(run_dir);
  const auto pc = ckpt::load(run_dir / "predictor.ckpt");
  const std::uint64_t seed = pc.meta.at("seed").get<std::uint64_t>();
  Dataset ds = load_dataset(manifest);
  preprocess(ds, pc.meta.value("per_slice_normalization", true));
  const auto synthetic = translate_all(tr, ds, seed);
  TranslateSummary sum;
  std::vector<double> mse_syn, mse_src;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    check_id_is_file_safe(ds[i].id);
    write_image_file(out_dir / "synthetic" / (ds[i].id + ".synthetic.f32"), synthetic[i]);
    if (overlays) write_overlay(out_dir / "overlays" / (ds[i].id + ".pgm"), ds[i].source, synthetic[i], ds[i].target);
    if (ds[i].target) {
      mse_syn.push_back(image_mse(synthetic[i], *ds[i].target));
      mse_src.push_back(image_mse(ds[i].source, *ds[i].target));
    }
  }
  sum.n = ds.size();
  sum.n_with_target = mse_syn.size();
  if (!mse_syn.empty()) {
    sum.mse_synthetic_mean = stats::mean(mse_syn);
    sum.mse_source_mean = stats::mean(mse_src);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// evaluate

// Reads `<pred_dir>/<id>.mask.u8` for every manifest sample and writes
// `report.json` and `table.txt` into `out_dir`.
inline metrics::AggregateReport cmd_evaluate(const io::fs::path& pred_dir, const io::fs::path& manifest,
                                             const metrics::MetricsConfig& cfg, const io::fs::path& out_dir,
                                             const std::string& method = "model") {
  cfg.validate();
  const Dataset ds = load_dataset(manifest, LoadOptions{false});
  std::vector<Mask> preds;
  for (const auto& s : ds) {
    check_id_is_file_safe(s.id);
    const auto path = pred_dir / (s.id + ".mask.u8");
    if (!io::fs::exists(path)) throw DataError("missing prediction for sample '" + s.id + "' (" + path.string() + ")");
    preds.push_back(detail::read_mask(path, s.mask.rows, s.mask.cols, s.id));
    for (auto v : preds.back().data)
      if (v > 1) throw DataError("prediction for '" + s.id + "' is not binary");
  }
  const auto report = metrics::evaluate_dataset(preds, ds, cfg);
  write_json(out_dir / "report.json", metrics::report_to_json(report));
  io::write_text(out_dir / "table.txt", metrics::format_table(method, report));
  return report;
}

// ---------------------------------------------------------------------------
// train

struct TrainOutcome {
  std::optional<metrics::AggregateReport> report;
  std::vector<LossRecord> history;
  std::vector<std::string> artifacts;
};

namespace detail {

inline void check_state_matches(const TrainState<Real>& st, const RunConfig& cfg) {
  if (nlohmann::json(st.translator.config()) != nlohmann::json(cfg.translator) ||
      nlohmann::json(st.predictor.config()) != nlohmann::json(cfg.predictor))
    throw ConfigError("state.ckpt was written with a different model configuration");
}

}  // namespace detail

// Trains according to `cfg.mode` and writes checkpoints, loss.csv,
// config.json and run_record.json into cfg.output_dir. When a test
// manifest is configured, also infers on it and writes report.json.
inline TrainOutcome cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const io::fs::path out = cfg.output_dir;
  RunLock lock(out);
  const std::string started = utc_timestamp();
  write_json(out / "config.json", nlohmann::json(cfg));
  if (cfg.train_manifest.empty()) throw ConfigError("train_manifest must be set");

  // Source-only modes never open target arrays, even during training.
  Dataset train = load_dataset(cfg.train_manifest, LoadOptions{cfg.mode != Mode::kUnetSource});
  preprocess(train, cfg.per_slice_normalization);
  if (cfg.mode != Mode::kUnetSource)
    for (const auto& s : train)
      if (!s.target)
        throw DataError(std::string("mode ") + mode_name(cfg.mode) + " needs target images but sample '" + s.id +
                        "' has none");

  const auto state_path = out / "state.ckpt";
  std::optional<TrainState<Real>> restored;
  if (cfg.resume && io::fs::exists(state_path)) {
    restored.emplace(deserialize_state<Real>(ckpt::load(state_path)));
    detail::check_state_matches(*restored, cfg);
  }
  TrainState<Real> st = restored ? std::move(*restored) : TrainState<Real>(cfg.translator, cfg.predictor, cfg.seed);
  auto save_state = [&](const TrainState<Real>& s) {
    ckpt::save(state_path, serialize_state(s));
    io::write_text(out / "loss.csv", history_csv(s.history));
  };

  try {
    if (uses_translator(cfg.mode)) {
      const auto [d_t, d_p] = split_train(train, SplitSpec{cfg.seed, cfg.meta.split_fraction});
      pretrain<Real>(d_t, d_p, st, cfg.meta, cfg.dice, {}, save_state);
      if (cfg.mode == Mode::kMetaT2) meta_train<Real>(d_t, d_p, st, cfg.meta, cfg.dice, save_state);
    } else {
      // Direct predictor training on the whole training set with the same
      // epoch budget as pretraining plus meta-training.
      std::vector<Image> second;
      for (const auto& s : train) second.push_back(cfg.mode == Mode::kUnetBoth ? *s.target : s.source);
      const int epochs = cfg.meta.epochs_predictor_pretrain + cfg.meta.epochs_meta;
      if (epochs > 0 && train.empty()) throw DataError("training set is empty");
      train_predictor_epochs<Real>(train, second, st, epochs, cfg.meta, cfg.dice, save_state);
    }
  } catch (const NumericError&) {
    save_state(st);  // updates are rejected before they apply, so `st` is the last good state
    throw;
  }

  TrainOutcome res;
  save_state(st);
  res.artifacts = {"config.json", "state.ckpt", "loss.csv", "predictor.ckpt"};
  ckpt::save(out / "predictor.ckpt", predictor_checkpoint(st.predictor, cfg.mode, cfg.seed, cfg.per_slice_normalization));
  if (uses_translator(cfg.mode)) {
    ckpt::save(out / "translator.ckpt", translator_checkpoint(st.translator, cfg.seed));
    res.artifacts.push_back("translator.ckpt");
  }
  if (!cfg.test_manifest.empty()) {
    cmd_infer(out, cfg.test_manifest, out, cfg.mode);
    res.report = cmd_evaluate(out / "masks", cfg.test_manifest, cfg.metrics, out, mode_name(cfg.mode));
    for (const char* a : {"masks", "report.json", "table.txt"}) res.artifacts.push_back(a);
  }
  res.artifacts.push_back("run_record.json");
  res.history = st.history;

  nlohmann::json record = {{"toolkit_version", kToolkitVersion},
                           {"seed", cfg.seed},
                           {"mode", mode_name(cfg.mode)},
                           {"config", nlohmann::json(cfg)},
                           {"started_at", started},
                           {"finished_at", utc_timestamp()},
                           {"artifacts", res.artifacts},
                           {"report", res.report ? metrics::report_to_json(*res.report) : nlohmann::json(nullptr)}};
  write_json(out / "run_record.json", record);
  return res;
}

}  // namespace metat2
