#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "core.hpp"
#include "png_io.hpp"

namespace semdefect::simgen {

using nlohmann::json;

enum class Orientation { horizontal, vertical };

inline std::string to_string(Orientation o) {
  return o == Orientation::vertical ? "vertical" : "horizontal";
}

inline Orientation orientation_from_string(const std::string& s) {
  if (s == "vertical") return Orientation::vertical;
  if (s == "horizontal") return Orientation::horizontal;
  throw ParameterError("orientation must be 'vertical' or 'horizontal', got '" + s + "'");
}

// Periodic line pattern parameters for one synthetic SEM background.
struct PatternSpec {
  int width = 256;
  int height = 256;
  int line_period = 8;
  int line_width = 4;
  Orientation orientation = Orientation::vertical;
  double fg_level = 0.7;
  double bg_level = 0.3;
  double noise_sigma = 0.03;
  double edge_blur_sigma = 0.8;

  void validate() const {
    if (width <= 0 || height <= 0)
      throw ParameterError("PatternSpec: width and height must be positive");
    if (!(line_width > 0))
      throw ParameterError("PatternSpec: violated 0 < line_width");
    if (!(line_width < line_period))
      throw ParameterError("PatternSpec: violated line_width < line_period");
    int along = orientation == Orientation::vertical ? width : height;
    if (!(line_period <= along))
      throw ParameterError("PatternSpec: violated line_period <= image extent");
    if (!(0.0 <= bg_level && bg_level < fg_level && fg_level <= 1.0))
      throw ParameterError("PatternSpec: violated 0 <= bg_level < fg_level <= 1");
    if (noise_sigma < 0.0)
      throw ParameterError("PatternSpec: violated noise_sigma >= 0");
    if (edge_blur_sigma < 0.0)
      throw ParameterError("PatternSpec: violated edge_blur_sigma >= 0");
  }
};

// A single additive particle defect.
struct DefectSpec {
  double center_row = 0.0;
  double center_col = 0.0;
  double radius = 3.0;
  double intensity_delta = 0.3;
  double softness_sigma = 0.0;

  // Pixels farther than this from the center are untouched.
  double footprint_radius() const { return radius + 5.0 * softness_sigma; }

  void validate(int rows, int cols) const {
    if (!(radius > 0.0)) throw ParameterError("DefectSpec: violated radius > 0");
    if (softness_sigma < 0.0) throw ParameterError("DefectSpec: violated softness_sigma >= 0");
    double fr = footprint_radius();
    if (center_row - fr < 0 || center_col - fr < 0 || center_row + fr > rows - 1 ||
        center_col + fr > cols - 1)
      throw ParameterError("DefectSpec: defect footprint out of image bounds");
  }
};

namespace detail {

// Separable Gaussian blur with reflected boundaries.
inline GrayImage gaussian_blur(const GrayImage& img, double sigma) {
  if (sigma <= 0.0) return img;
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };

  GrayImage tmp(img.rows(), img.cols());
  for (int r = 0; r < img.rows(); ++r)
    for (int c = 0; c < img.cols(); ++c) {
      double v = 0.0;
      for (int k = -radius; k <= radius; ++k)
        v += kernel[k + radius] * img.at(r, reflect(c + k, img.cols()));
      tmp.at(r, c) = v;
    }
  GrayImage out(img.rows(), img.cols());
  for (int r = 0; r < img.rows(); ++r)
    for (int c = 0; c < img.cols(); ++c) {
      double v = 0.0;
      for (int k = -radius; k <= radius; ++k)
        v += kernel[k + radius] * tmp.at(reflect(r + k, img.rows()), c);
      out.at(r, c) = v;
    }
  return out;
}

// Smoothed-disk radial profile in [0,1]: indicator of r <= R convolved with a
// Gaussian of width sigma, evaluated radially.
inline double disk_profile(double r, double R, double sigma) {
  if (sigma <= 0.0) return r <= R ? 1.0 : 0.0;
  return 0.5 * (1.0 + std::erf((R - r) / (sigma * std::sqrt(2.0))));
}

}  // namespace detail

// Noise-free pattern (square wave plus edge blur). Shared by gen_background
// and the reference/defect pair generator.
inline GrayImage gen_pattern(const PatternSpec& spec) {
  spec.validate();
  GrayImage img(spec.height, spec.width);
  for (int r = 0; r < spec.height; ++r)
    for (int c = 0; c < spec.width; ++c) {
      int along = spec.orientation == Orientation::vertical ? c : r;
      img.at(r, c) = (along % spec.line_period) < spec.line_width ? spec.fg_level : spec.bg_level;
    }
  return detail::gaussian_blur(img, spec.edge_blur_sigma);
}

inline GrayImage add_noise(const GrayImage& img, double sigma, uint64_t seed) {
  if (sigma <= 0.0) return img;
  auto rng = make_rng(seed, 0x6e6f6973);
  std::normal_distribution<double> noise(0.0, sigma);
  GrayImage out(img.rows(), img.cols());
  for (size_t i = 0; i < img.size(); ++i) out[i] = clip01(img[i] + noise(rng));
  return out;
}

// Deterministic for fixed (spec, seed).
inline SemImage gen_background(const PatternSpec& spec, uint64_t seed) {
  GrayImage img = add_noise(gen_pattern(spec), spec.noise_sigma, seed);
  return SemImage{std::move(img), seed};
}

// Adds an isotropic smoothed-disk profile and returns the image together with
// the half-peak-threshold ground-truth mask. Pixels outside the footprint are
// untouched.
inline std::pair<SemImage, DefectMask> implant_defect(const SemImage& img, const DefectSpec& d,
                                                      uint64_t seed) {
  d.validate(img.rows(), img.cols());
  SemImage out{img.pixels, seed};
  DefectMask mask{Image2D<uint8_t>(img.rows(), img.cols(), 0)};
  if (d.intensity_delta == 0.0) return {std::move(out), std::move(mask)};

  const double fr = d.footprint_radius();
  const double peak = detail::disk_profile(0.0, d.radius, d.softness_sigma);
  const int r0 = std::max(0, static_cast<int>(std::floor(d.center_row - fr)));
  const int r1 = std::min(img.rows() - 1, static_cast<int>(std::ceil(d.center_row + fr)));
  const int c0 = std::max(0, static_cast<int>(std::floor(d.center_col - fr)));
  const int c1 = std::min(img.cols() - 1, static_cast<int>(std::ceil(d.center_col + fr)));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      double dist = std::hypot(r - d.center_row, c - d.center_col);
      if (dist > fr) continue;
      double profile = detail::disk_profile(dist, d.radius, d.softness_sigma);
      out.pixels.at(r, c) = clip01(out.pixels.at(r, c) + d.intensity_delta * profile);
      if (profile > 0.5 * peak) mask.labels.at(r, c) = 1;
    }
  return {std::move(out), std::move(mask)};
}

inline json to_json(const PatternSpec& s) {
  return json{{"width", s.width},
              {"height", s.height},
              {"line_period", s.line_period},
              {"line_width", s.line_width},
              {"orientation", to_string(s.orientation)},
              {"fg_level", s.fg_level},
              {"bg_level", s.bg_level},
              {"noise_sigma", s.noise_sigma},
              {"edge_blur_sigma", s.edge_blur_sigma}};
}

inline PatternSpec pattern_from_json(const json& j) {
  PatternSpec s;
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  s.line_period = j.at("line_period").get<int>();
  s.line_width = j.at("line_width").get<int>();
  s.orientation = orientation_from_string(j.at("orientation").get<std::string>());
  s.fg_level = j.at("fg_level").get<double>();
  s.bg_level = j.at("bg_level").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.edge_blur_sigma = j.at("edge_blur_sigma").get<double>();
  return s;
}

inline json to_json(const DefectSpec& d) {
  return json{{"kind", "particle"},
              {"center", {d.center_row, d.center_col}},
              {"radius", d.radius},
              {"intensity_delta", d.intensity_delta},
              {"softness_sigma", d.softness_sigma}};
}

inline DefectSpec defect_from_json(const json& j) {
  DefectSpec d;
  d.center_row = j.at("center").at(0).get<double>();
  d.center_col = j.at("center").at(1).get<double>();
  d.radius = j.at("radius").get<double>();
  d.intensity_delta = j.at("intensity_delta").get<double>();
  d.softness_sigma = j.at("softness_sigma").get<double>();
  return d;
}

// Dataset generation --------------------------------------------------------

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double sample(std::mt19937_64& rng) const {
    if (hi <= lo) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
};

struct DatasetConfig {
  int train_count = 200;
  int test_count = 50;
  int width = 64;
  int height = 64;
  // Line period that does not divide the image extent keeps circular shifts
  // unambiguous for the registration baseline.
  int period_min = 6;
  int period_max = 11;
  Range duty = {0.35, 0.6};     // line_width / line_period
  Range fg_level = {0.6, 0.75};
  Range bg_level = {0.2, 0.35};
  double noise_sigma = 0.02;     // per-capture acquisition noise
  double texture_sigma = 0.04;   // die texture shared by a ref/def pair
  double edge_blur_sigma = 0.8;
  bool random_orientation = true;
  Range defect_radius = {2.5, 4.5};
  Range defect_delta = {0.3, 0.4};
  Range defect_softness = {0.0, 0.7};
  int defects_per_image = 1;
  int max_shift = 4;            // reference-to-defect die misalignment
  uint64_t base_seed = 1;

  void validate() const {
    if (train_count < 0 || test_count < 0)
      throw ParameterError("DatasetConfig: counts must be nonnegative");
    if (width <= 0 || height <= 0) throw ParameterError("DatasetConfig: bad image size");
    if (period_min < 2 || period_max < period_min)
      throw ParameterError("DatasetConfig: bad period range");
    if (defects_per_image < 1) throw ParameterError("DatasetConfig: defects_per_image >= 1");
    if (max_shift < 0) throw ParameterError("DatasetConfig: max_shift >= 0");
  }
};

inline json to_json(const DatasetConfig& c) {
  return json{{"train_count", c.train_count},
              {"test_count", c.test_count},
              {"width", c.width},
              {"height", c.height},
              {"period_min", c.period_min},
              {"period_max", c.period_max},
              {"duty", {c.duty.lo, c.duty.hi}},
              {"fg_level", {c.fg_level.lo, c.fg_level.hi}},
              {"bg_level", {c.bg_level.lo, c.bg_level.hi}},
              {"noise_sigma", c.noise_sigma},
              {"texture_sigma", c.texture_sigma},
              {"edge_blur_sigma", c.edge_blur_sigma},
              {"random_orientation", c.random_orientation},
              {"defect_radius", {c.defect_radius.lo, c.defect_radius.hi}},
              {"defect_delta", {c.defect_delta.lo, c.defect_delta.hi}},
              {"defect_softness", {c.defect_softness.lo, c.defect_softness.hi}},
              {"defects_per_image", c.defects_per_image},
              {"max_shift", c.max_shift},
              {"base_seed", c.base_seed}};
}

inline Range range_from_json(const json& j) { return Range{j.at(0).get<double>(), j.at(1).get<double>()}; }

inline DatasetConfig dataset_config_from_json(const json& j) {
  DatasetConfig c;
  c.train_count = j.at("train_count").get<int>();
  c.test_count = j.at("test_count").get<int>();
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  c.period_min = j.value("period_min", c.period_min);
  c.period_max = j.value("period_max", c.period_max);
  if (j.contains("duty")) c.duty = range_from_json(j.at("duty"));
  if (j.contains("fg_level")) c.fg_level = range_from_json(j.at("fg_level"));
  if (j.contains("bg_level")) c.bg_level = range_from_json(j.at("bg_level"));
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.texture_sigma = j.value("texture_sigma", c.texture_sigma);
  c.edge_blur_sigma = j.value("edge_blur_sigma", c.edge_blur_sigma);
  c.random_orientation = j.value("random_orientation", c.random_orientation);
  if (j.contains("defect_radius")) c.defect_radius = range_from_json(j.at("defect_radius"));
  if (j.contains("defect_delta")) c.defect_delta = range_from_json(j.at("defect_delta"));
  if (j.contains("defect_softness")) c.defect_softness = range_from_json(j.at("defect_softness"));
  c.defects_per_image = j.value("defects_per_image", c.defects_per_image);
  c.max_shift = j.value("max_shift", c.max_shift);
  c.base_seed = j.value("base_seed", c.base_seed);
  return c;
}

struct ManifestRecord {
  std::string split;           // "train" or "test"
  std::string image_path;
  std::string mask_path;       // test only
  std::string ref_path;        // test only
  int shift_dy = 0;            // reference-to-defect shift, test only
  int shift_dx = 0;
  uint64_t seed = 0;
  PatternSpec spec;
  std::vector<DefectSpec> defects;
};

struct Manifest {
  DatasetConfig config;
  std::vector<ManifestRecord> records;

  std::vector<const ManifestRecord*> split(const std::string& name) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& r : records)
      if (r.split == name) out.push_back(&r);
    return out;
  }
};

inline json to_json(const Manifest& m) {
  json recs = json::array();
  for (const auto& r : m.records) {
    json jr{{"split", r.split}, {"image_path", r.image_path}, {"seed", r.seed},
            {"spec", to_json(r.spec)}};
    if (!r.mask_path.empty()) jr["mask_path"] = r.mask_path;
    if (!r.ref_path.empty()) {
      jr["ref_path"] = r.ref_path;
      jr["shift"] = {r.shift_dy, r.shift_dx};
    }
    if (!r.defects.empty()) {
      json jd = json::array();
      for (const auto& d : r.defects) jd.push_back(to_json(d));
      jr["defects"] = jd;
    }
    recs.push_back(std::move(jr));
  }
  return json{{"version", 1}, {"config", to_json(m.config)}, {"records", std::move(recs)}};
}

inline Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.config = dataset_config_from_json(j.at("config"));
  for (const auto& jr : j.at("records")) {
    ManifestRecord r;
    r.split = jr.at("split").get<std::string>();
    r.image_path = jr.at("image_path").get<std::string>();
    r.mask_path = jr.value("mask_path", "");
    r.ref_path = jr.value("ref_path", "");
    if (jr.contains("shift")) {
      r.shift_dy = jr.at("shift").at(0).get<int>();
      r.shift_dx = jr.at("shift").at(1).get<int>();
    }
    r.seed = jr.at("seed").get<uint64_t>();
    r.spec = pattern_from_json(jr.at("spec"));
    if (jr.contains("defects"))
      for (const auto& jd : jr.at("defects")) r.defects.push_back(defect_from_json(jd));
    m.records.push_back(std::move(r));
  }
  return m;
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw EnvironmentError("load_manifest: cannot open " + path);
  json j;
  in >> j;
  return manifest_from_json(j);
}

inline GrayImage circular_shift(const GrayImage& img, int dy, int dx) {
  GrayImage out(img.rows(), img.cols());
  const int H = img.rows(), W = img.cols();
  auto wrap = [](int i, int n) { int m = i % n; return m < 0 ? m + n : m; };
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) out.at(wrap(r + dy, H), wrap(c + dx, W)) = img.at(r, c);
  return out;
}

inline PatternSpec sample_pattern(const DatasetConfig& cfg, std::mt19937_64& rng) {
  PatternSpec s;
  s.width = cfg.width;
  s.height = cfg.height;
  s.line_period =
      std::uniform_int_distribution<int>(cfg.period_min, cfg.period_max)(rng);
  int lw = static_cast<int>(std::lround(cfg.duty.sample(rng) * s.line_period));
  s.line_width = std::clamp(lw, 1, s.line_period - 1);
  s.orientation = cfg.random_orientation && std::uniform_int_distribution<int>(0, 1)(rng)
                      ? Orientation::horizontal
                      : Orientation::vertical;
  s.fg_level = cfg.fg_level.sample(rng);
  s.bg_level = cfg.bg_level.sample(rng);
  s.noise_sigma = cfg.noise_sigma;
  s.edge_blur_sigma = cfg.edge_blur_sigma;
  return s;
}

inline DefectSpec sample_defect(const DatasetConfig& cfg, const PatternSpec& s,
                                std::mt19937_64& rng) {
  DefectSpec d;
  d.radius = cfg.defect_radius.sample(rng);
  d.intensity_delta = cfg.defect_delta.sample(rng);
  d.softness_sigma = cfg.defect_softness.sample(rng);
  double margin = d.footprint_radius() + 2.0;
  d.center_row = std::uniform_real_distribution<double>(margin, s.height - 1 - margin)(rng);
  d.center_col = std::uniform_real_distribution<double>(margin, s.width - 1 - margin)(rng);
  return d;
}

// Writes clean train images, (defect, mask, reference) test triples, and a
// JSON manifest. Re-running with the same config reproduces identical bytes.
inline Manifest gen_dataset(const DatasetConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "train", ec);
  fs::create_directories(fs::path(out_dir) / "test", ec);
  if (ec) throw EnvironmentError("gen_dataset: cannot create " + out_dir);

  Manifest m;
  m.config = cfg;

  char name[64];
  for (int i = 0; i < cfg.train_count; ++i) {
    uint64_t seed = mix_seed(cfg.base_seed, 0x74000000ULL + i);
    auto rng = make_rng(seed, 1);
    ManifestRecord r;
    r.split = "train";
    r.seed = seed;
    r.spec = sample_pattern(cfg, rng);
    std::snprintf(name, sizeof(name), "train/clean_%04d.png", i);
    r.image_path = name;
    // Same two-layer noise model as the test captures: die texture plus
    // acquisition noise.
    GrayImage img = add_noise(gen_pattern(r.spec), cfg.texture_sigma, mix_seed(seed, 10));
    img = add_noise(img, cfg.noise_sigma, mix_seed(seed, 12));
    save_image((fs::path(out_dir) / r.image_path).string(), SemImage{std::move(img), seed});
    m.records.push_back(std::move(r));
  }

  for (int i = 0; i < cfg.test_count; ++i) {
    uint64_t seed = mix_seed(cfg.base_seed, 0x65000000ULL + i);
    auto rng = make_rng(seed, 2);
    ManifestRecord r;
    r.split = "test";
    r.seed = seed;
    r.spec = sample_pattern(cfg, rng);

    // Two dies share the pattern and its texture; each capture adds its own
    // acquisition noise.
    GrayImage base = add_noise(gen_pattern(r.spec), cfg.texture_sigma, mix_seed(seed, 10));
    GrayImage ref = add_noise(base, cfg.noise_sigma, mix_seed(seed, 11));
    r.shift_dy = std::uniform_int_distribution<int>(-cfg.max_shift, cfg.max_shift)(rng);
    r.shift_dx = std::uniform_int_distribution<int>(-cfg.max_shift, cfg.max_shift)(rng);
    SemImage def{circular_shift(base, r.shift_dy, r.shift_dx), seed};

    DefectMask mask{Image2D<uint8_t>(cfg.height, cfg.width, 0)};
    for (int k = 0; k < cfg.defects_per_image; ++k) {
      DefectSpec d = sample_defect(cfg, r.spec, rng);
      auto [with_defect, dmask] = implant_defect(def, d, seed);
      def = std::move(with_defect);
      for (size_t p = 0; p < mask.labels.size(); ++p)
        mask.labels[p] = mask.labels[p] || dmask.labels[p];
      r.defects.push_back(d);
    }
    def.pixels = add_noise(def.pixels, cfg.noise_sigma, mix_seed(seed, 12));

    std::snprintf(name, sizeof(name), "test/defect_%04d.png", i);
    r.image_path = name;
    save_image((fs::path(out_dir) / r.image_path).string(), def);
    std::snprintf(name, sizeof(name), "test/mask_%04d.png", i);
    r.mask_path = name;
    save_mask((fs::path(out_dir) / r.mask_path).string(), mask);
    std::snprintf(name, sizeof(name), "test/ref_%04d.png", i);
    r.ref_path = name;
    save_image((fs::path(out_dir) / r.ref_path).string(), SemImage{ref, seed});
    m.records.push_back(std::move(r));
  }

  std::ofstream out(fs::path(out_dir) / "manifest.json");
  if (!out) throw EnvironmentError("gen_dataset: cannot write manifest");
  out << to_json(m).dump(2) << "\n";
  return m;
}

}  // namespace semdefect::simgen
