#pragma once

// Data model, on-disk format, preprocessing, splitting, and the synthetic
// paired-modality generator.
//
// On-disk layout: `<root>/manifest.json` plus one raw array file per image,
// row-major, float32 little-endian for images and uint8 for masks. Shapes live
// in the manifest only.

#include "metat2/config_keys.hpp"
#include "metat2/errors.hpp"
#include "metat2/grid.hpp"
#include "metat2/io.hpp"
#include "metat2/rng.hpp"
#include "metat2/stats.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace metat2 {

struct Spacing {
  double row_mm = 1.0;
  double col_mm = 1.0;
  bool operator==(const Spacing&) const = default;
};

// One 2D case. `target` is the privileged modality, absent at inference.
struct Sample {
  std::string id;
  Image source;
  std::optional<Image> target;
  Mask mask;
  Spacing spacing;

  bool operator==(const Sample&) const = default;
};

using Dataset = std::vector<Sample>;

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";

inline void validate_sample(const Sample& s) {
  auto fail = [&](const std::string& why) { throw DataError("sample '" + s.id + "': " + why); };
  if (s.source.rows <= 0 || s.source.cols <= 0) fail("empty source image");
  if (s.source.size() != static_cast<std::size_t>(s.source.rows) * s.source.cols) fail("source size mismatch");
  if (!s.mask.same_shape(s.source) || s.mask.size() != s.source.size()) fail("mask shape differs from source");
  if (s.target && (!s.target->same_shape(s.source) || s.target->size() != s.source.size()))
    fail("target shape differs from source");
  for (float v : s.source.data)
    if (!(v >= -1.0f && v <= 1.0f)) fail("source intensity outside [-1, 1]");
  if (s.target)
    for (float v : s.target->data)
      if (!(v >= -1.0f && v <= 1.0f)) fail("target intensity outside [-1, 1]");
  for (auto v : s.mask.data)
    if (v > 1) fail("mask value " + std::to_string(v) + " is not binary");
  if (!(s.spacing.row_mm > 0) || !(s.spacing.col_mm > 0)) fail("spacing must be positive");
}

// ---------------------------------------------------------------------------
// Manifest IO

struct LoadOptions {
  // When false, target arrays are never opened and samples carry no target.
  bool read_targets = true;
};

namespace detail {

inline Image read_image(const io::fs::path& path, int rows, int cols, const std::string& id) {
  std::vector<char> bytes;
  try {
    bytes = io::read_bytes(path);
  } catch (const DataError&) {
    throw DataError("sample '" + id + "': missing file " + path.string());
  }
  Image img;
  img.rows = rows;
  img.cols = cols;
  img.data = io::decode_f32(bytes);
  if (img.data.size() != static_cast<std::size_t>(rows) * cols)
    throw DataError("sample '" + id + "': " + path.filename().string() + " does not decode to " +
                    std::to_string(rows) + "x" + std::to_string(cols));
  return img;
}

inline Mask read_mask(const io::fs::path& path, int rows, int cols, const std::string& id) {
  std::vector<char> bytes;
  try {
    bytes = io::read_bytes(path);
  } catch (const DataError&) {
    throw DataError("sample '" + id + "': missing file " + path.string());
  }
  if (bytes.size() != static_cast<std::size_t>(rows) * cols)
    throw DataError("sample '" + id + "': " + path.filename().string() + " does not decode to " +
                    std::to_string(rows) + "x" + std::to_string(cols));
  Mask m(rows, cols);
  std::copy(bytes.begin(), bytes.end(), reinterpret_cast<char*>(m.data.data()));
  return m;
}

}  // namespace detail

inline Dataset load_dataset(const io::fs::path& manifest_path, const LoadOptions& opts = {}) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + " does not parse: " + e.what());
  }
  const auto root = manifest_path.parent_path();
  Dataset out;
  try {
    if (doc.at("version").get<int>() != kManifestVersion)
      throw DataError("unsupported manifest version in " + manifest_path.string());
    const int rows = doc.at("image_size").at(0).get<int>();
    const int cols = doc.at("image_size").at(1).get<int>();
    std::set<std::string> seen;
    for (const auto& entry : doc.at("samples")) {
      Sample s;
      s.id = entry.at("id").get<std::string>();
      if (!seen.insert(s.id).second) throw DataError("duplicate sample id '" + s.id + "'");
      s.source = detail::read_image(root / entry.at("source_path").get<std::string>(), rows, cols, s.id);
      if (opts.read_targets && entry.contains("target_path") && !entry.at("target_path").is_null())
        s.target = detail::read_image(root / entry.at("target_path").get<std::string>(), rows, cols, s.id);
      s.mask = detail::read_mask(root / entry.at("mask_path").get<std::string>(), rows, cols, s.id);
      if (entry.contains("spacing")) {
        s.spacing.row_mm = entry.at("spacing").at(0).get<double>();
        s.spacing.col_mm = entry.at("spacing").at(1).get<double>();
      }
      validate_sample(s);
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + " is malformed: " + e.what());
  }
  return out;
}

// Ids are used as file stems, so they are restricted to a portable set.
inline void check_id_is_file_safe(const std::string& id) {
  if (id.empty()) throw DataError("empty sample id");
  for (char c : id)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'))
      throw DataError("sample id '" + id + "' contains characters outside [A-Za-z0-9_.-]");
}

inline void write_mask_file(const io::fs::path& path, const Mask& m) {
  io::write_atomic(path, m.data.data(), m.data.size());
}

inline void write_image_file(const io::fs::path& path, const Image& img) {
  const auto bytes = io::encode_f32(img.data);
  io::write_atomic(path, bytes.data(), bytes.size());
}

// Writes arrays under `<dir>/arrays/` and `<dir>/manifest.json`.
inline void write_dataset(const Dataset& ds, const io::fs::path& dir) {
  io::fs::create_directories(dir / "arrays");
  nlohmann::json doc;
  doc["version"] = kManifestVersion;
  const int rows = ds.empty() ? 0 : ds.front().source.rows;
  const int cols = ds.empty() ? 0 : ds.front().source.cols;
  doc["image_size"] = {rows, cols};
  doc["samples"] = nlohmann::json::array();
  for (const auto& s : ds) {
    validate_sample(s);
    check_id_is_file_safe(s.id);
    if (s.source.rows != rows || s.source.cols != cols)
      throw DataError("sample '" + s.id + "': all samples in a manifest share one image size");
    nlohmann::json e;
    e["id"] = s.id;
    e["source_path"] = "arrays/" + s.id + ".source.f32";
    write_image_file(dir / e["source_path"].get<std::string>(), s.source);
    if (s.target) {
      e["target_path"] = "arrays/" + s.id + ".target.f32";
      write_image_file(dir / e["target_path"].get<std::string>(), *s.target);
    }
    e["mask_path"] = "arrays/" + s.id + ".mask.u8";
    write_mask_file(dir / e["mask_path"].get<std::string>(), s.mask);
    e["spacing"] = {s.spacing.row_mm, s.spacing.col_mm};
    doc["samples"].push_back(std::move(e));
  }
  io::write_text(dir / kManifestName, doc.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Preprocessing

// Clips to the [lo_pct, hi_pct] intensity percentiles and maps the clip
// bounds onto -1 and +1. A constant image maps to zeros.
inline Image normalize_slice(const Image& image, double lo_pct = 1.0, double hi_pct = 99.0) {
  if (image.empty()) throw std::invalid_argument("normalize_slice: empty image");
  if (!(lo_pct >= 0 && hi_pct <= 100 && lo_pct < hi_pct))
    throw std::invalid_argument("normalize_slice: need 0 <= lo_pct < hi_pct <= 100");
  std::vector<double> values(image.data.begin(), image.data.end());
  const double lo = stats::percentile(values, lo_pct);
  const double hi = stats::percentile(values, hi_pct);
  Image out(image.rows, image.cols, 0.0f);
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(static_cast<double>(image.data[i]), lo, hi);
    out.data[i] = static_cast<float>(std::clamp(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0, 1.0));
  }
  return out;
}

// Centered window; for odd margins the extra row/column is dropped from the
// high-index side.
template <class T>
Grid<T> center_crop(const Grid<T>& image, int rows, int cols) {
  if (rows <= 0 || cols <= 0 || rows > image.rows || cols > image.cols)
    throw std::invalid_argument("center_crop: requested " + std::to_string(rows) + "x" + std::to_string(cols) +
                                " from " + std::to_string(image.rows) + "x" + std::to_string(image.cols));
  const int r0 = (image.rows - rows) / 2;
  const int c0 = (image.cols - cols) / 2;
  Grid<T> out(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(r, c) = image.at(r0 + r, c0 + c);
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  std::uint64_t seed = 0;
  double fraction_t = 0.5;
};

// Patient key: the id up to the first '_' (whole id when there is none).
inline std::string patient_key(const std::string& id) { return id.substr(0, id.find('_')); }

// Randomly partitions `ds` into (D_T, D_P). Samples sharing a patient key stay
// together. Within each subset the input order is kept.
inline std::pair<Dataset, Dataset> split_train(const Dataset& ds, const SplitSpec& spec) {
  if (ds.empty()) throw DataError("split_train: empty dataset");
  if (!(spec.fraction_t > 0 && spec.fraction_t < 1)) throw ConfigError("split fraction must lie in (0, 1)");

  std::map<std::string, std::vector<std::size_t>> by_key;
  std::vector<std::string> keys;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto key = patient_key(ds[i].id);
    if (!by_key.count(key)) keys.push_back(key);
    by_key[key].push_back(i);
  }
  Rng rng(spec.seed);
  std::shuffle(keys.begin(), keys.end(), rng.engine());

  const auto target = static_cast<std::size_t>(std::llround(spec.fraction_t * static_cast<double>(ds.size())));
  std::vector<bool> in_t(ds.size(), false);
  std::size_t n_t = 0;
  for (const auto& key : keys) {
    const auto& members = by_key[key];
    if (n_t + members.size() <= target) {
      for (auto i : members) in_t[i] = true;
      n_t += members.size();
    }
  }
  std::pair<Dataset, Dataset> out;
  for (std::size_t i = 0; i < ds.size(); ++i) (in_t[i] ? out.first : out.second).push_back(ds[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SyntheticSpec {
  int n_samples = 200;
  int rows = 64;
  int cols = 64;
  int lesion_count_min = 1;
  int lesion_count_max = 3;
  double lesion_radius_min = 3.0;
  double lesion_radius_max = 8.0;
  double source_lesion_contrast = 0.15;
  double target_lesion_contrast = 0.8;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_samples < 0) throw ConfigError("n_samples must be >= 0");
    if (rows <= 0 || cols <= 0) throw ConfigError("image_size must be positive");
    if (lesion_count_min < 0 || lesion_count_max < lesion_count_min)
      throw ConfigError("lesion_count_range must satisfy 0 <= min <= max");
    if (!(lesion_radius_min > 0) || lesion_radius_max < lesion_radius_min)
      throw ConfigError("lesion_radius_range must satisfy 0 < min <= max");
    if (2.0 * lesion_radius_max > std::min(rows, cols))
      throw ConfigError("lesion radius " + std::to_string(lesion_radius_max) + " exceeds the image size");
    if (source_lesion_contrast < 0 || source_lesion_contrast > 1 || target_lesion_contrast < 0 ||
        target_lesion_contrast > 1)
      throw ConfigError("lesion contrasts must lie in [0, 1]");
    if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"n_samples", s.n_samples},
       {"image_size", {s.rows, s.cols}},
       {"lesion_count_range", {s.lesion_count_min, s.lesion_count_max}},
       {"lesion_radius_range", {s.lesion_radius_min, s.lesion_radius_max}},
       {"source_lesion_contrast", s.source_lesion_contrast},
       {"target_lesion_contrast", s.target_lesion_contrast},
       {"noise_sigma", s.noise_sigma},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  require_known_keys(j, {"n_samples", "image_size", "lesion_count_range", "lesion_radius_range",
                         "source_lesion_contrast", "target_lesion_contrast", "noise_sigma", "seed"},
                     "generator spec");
  s = SyntheticSpec{};
  if (j.contains("n_samples")) s.n_samples = j.at("n_samples").get<int>();
  if (j.contains("image_size")) {
    s.rows = j.at("image_size").at(0).get<int>();
    s.cols = j.at("image_size").at(1).get<int>();
  }
  if (j.contains("lesion_count_range")) {
    s.lesion_count_min = j.at("lesion_count_range").at(0).get<int>();
    s.lesion_count_max = j.at("lesion_count_range").at(1).get<int>();
  }
  if (j.contains("lesion_radius_range")) {
    s.lesion_radius_min = j.at("lesion_radius_range").at(0).get<double>();
    s.lesion_radius_max = j.at("lesion_radius_range").at(1).get<double>();
  }
  if (j.contains("source_lesion_contrast")) s.source_lesion_contrast = j.at("source_lesion_contrast").get<double>();
  if (j.contains("target_lesion_contrast")) s.target_lesion_contrast = j.at("target_lesion_contrast").get<double>();
  if (j.contains("noise_sigma")) s.noise_sigma = j.at("noise_sigma").get<double>();
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
}

namespace detail {

// Low-frequency texture in [-1, 1]: a few random plane waves.
inline std::vector<double> smooth_texture(int rows, int cols, Rng& rng) {
  std::vector<double> field(static_cast<std::size_t>(rows) * cols, 0.0);
  for (int k = 0; k < 4; ++k) {
    const double amp = rng.uniform(0.5, 1.0);
    const double fy = rng.uniform(-2.0, 2.0);
    const double fx = rng.uniform(-2.0, 2.0);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        field[r * cols + c] +=
            amp * std::cos(2.0 * std::numbers::pi * (fy * r / rows + fx * c / cols) + phase);
  }
  double peak = 0;
  for (double v : field) peak = std::max(peak, std::abs(v));
  if (peak > 0)
    for (double& v : field) v /= peak;
  return field;
}

}  // namespace detail

// Background: texture scaled into the source; the target sees the same
// texture attenuated and shifted darker. Lesions are filled ellipses added
// with per-modality contrast, then Gaussian noise, then clipping to [-1, 1].
inline Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  constexpr double kTextureAmplitude = 0.35;
  constexpr double kSourceOffset = -0.2;
  constexpr double kTargetScale = 0.5;
  constexpr double kTargetOffset = -0.4;

  Rng rng(spec.seed);
  Dataset out;
  out.reserve(spec.n_samples);
  const int rows = spec.rows, cols = spec.cols;
  for (int i = 0; i < spec.n_samples; ++i) {
    Sample s;
    char id[32];
    std::snprintf(id, sizeof(id), "case%04d", i);
    s.id = id;
    const auto texture = detail::smooth_texture(rows, cols, rng);
    Mask lesion(rows, cols, 0);
    const int count = rng.uniform_int(spec.lesion_count_min, spec.lesion_count_max);
    for (int l = 0; l < count; ++l) {
      const double ra = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
      const double rb = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double reach = std::max(ra, rb);
      const double cy = rng.uniform(reach, rows - reach);
      const double cx = rng.uniform(reach, cols - reach);
      const double ca = std::cos(angle), sa = std::sin(angle);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          const double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
          const double u = (dx * ca + dy * sa) / ra;
          const double v = (-dx * sa + dy * ca) / rb;
          if (u * u + v * v <= 1.0) lesion.at(r, c) = 1;
        }
    }
    s.source = Image(rows, cols);
    s.target = Image(rows, cols);
    for (std::size_t p = 0; p < texture.size(); ++p) {
      const double bg = kSourceOffset + kTextureAmplitude * texture[p];
      const double tg = kTargetScale * bg + kTargetOffset;
      const double les = lesion.data[p];
      const double src = bg + spec.source_lesion_contrast * les + spec.noise_sigma * rng.normal();
      const double tgt = tg + spec.target_lesion_contrast * les + spec.noise_sigma * rng.normal();
      s.source.data[p] = static_cast<float>(std::clamp(src, -1.0, 1.0));
      s.target->data[p] = static_cast<float>(std::clamp(tgt, -1.0, 1.0));
    }
    s.mask = std::move(lesion);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace metat2
