#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>

#include "augment.hpp"
#include "classic.hpp"
#include "detect.hpp"
#include "evalkit.hpp"
#include "losses.hpp"
#include "net.hpp"
#include "simgen.hpp"

namespace semdefect::pipeline {

using nlohmann::json;

enum class TrainMode { wbce, wbce_dclr, wbce_consistency, ref_def };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::wbce: return "wbce";
    case TrainMode::wbce_dclr: return "wbce+dclr";
    case TrainMode::wbce_consistency: return "wbce+consistency";
    case TrainMode::ref_def: return "ref-def";
  }
  throw ConfigError("unknown train mode");
}

inline TrainMode mode_from_string(const std::string& s) {
  if (s == "wbce") return TrainMode::wbce;
  if (s == "wbce+dclr") return TrainMode::wbce_dclr;
  if (s == "wbce+consistency") return TrainMode::wbce_consistency;
  if (s == "ref-def") return TrainMode::ref_def;
  throw ConfigError("mode must be one of wbce, wbce+dclr, wbce+consistency, ref-def; got '" +
                    s + "'");
}

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& ctx) {
  if (!j.is_object()) throw ConfigError("config: expected an object for " + ctx);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) { ok = true; break; }
    if (!ok) throw ConfigError("config: unknown key '" + it.key() + "' in " + ctx);
  }
}

// FNV-1a over a byte string; used as the config digest.
inline std::string fnv1a_hex(const std::string& bytes) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detail

struct TrainConfig {
  TrainMode mode = TrainMode::wbce;
  std::string manifest_path;
  std::string out_dir = "run";
  net::NetConfig net;
  losses::LossConfig loss;
  double learning_rate = 2e-3;
  int steps = 800;
  int batch_size = 4;
  augment::CopyPasteSpec copy_paste;
  augment::PhotometricSpec photometric{0.02, 0.9, 1.1, -0.05, 0.05};
  uint64_t seed = 1;
  int checkpoint_every = 0;  // 0: final checkpoint only

  // Fills in the mode-dependent pieces a caller usually leaves implicit:
  // loss mix coefficients and the two-channel input of ref-def mode.
  void apply_mode_defaults() {
    if (mode == TrainMode::wbce_dclr && loss.lambda_clr == 0.0) loss.lambda_clr = 0.1;
    if (mode == TrainMode::wbce_consistency && loss.lambda_cons == 0.0) loss.lambda_cons = 0.1;
    if (mode == TrainMode::ref_def) net.in_channels = 2;
  }

  void validate() const {
    net.validate();
    loss.validate();
    if (manifest_path.empty()) throw ConfigError("TrainConfig: manifest path required");
    if (steps < 0) throw ConfigError("TrainConfig: steps >= 0 required");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size >= 1 required");
    if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning_rate > 0 required");
    if (checkpoint_every < 0) throw ConfigError("TrainConfig: checkpoint_every >= 0 required");
    if (mode == TrainMode::wbce_dclr && batch_size < 2)
      throw ConfigError("TrainConfig: wbce+dclr mode requires batch_size >= 2 "
                        "(negatives come from other images in the batch)");
    if (mode == TrainMode::ref_def && net.in_channels != 2)
      throw ConfigError("TrainConfig: ref-def mode requires a two-channel network");
  }
};

inline json to_json(const losses::LossConfig& c) {
  return json{{"tau", c.tau},
              {"clamp_eps", c.clamp_eps},
              {"pixel_sample_budget", c.pixel_sample_budget},
              {"lambda_bce", c.lambda_bce},
              {"lambda_clr", c.lambda_clr},
              {"lambda_cons", c.lambda_cons},
              {"include_positive_in_denominator", c.include_positive_in_denominator}};
}

inline losses::LossConfig loss_config_from_json(const json& j) {
  detail::check_keys(j,
                     {"tau", "clamp_eps", "pixel_sample_budget", "lambda_bce", "lambda_clr",
                      "lambda_cons", "include_positive_in_denominator"},
                     "loss");
  losses::LossConfig c;
  c.tau = j.value("tau", c.tau);
  c.clamp_eps = j.value("clamp_eps", c.clamp_eps);
  c.pixel_sample_budget = j.value("pixel_sample_budget", c.pixel_sample_budget);
  c.lambda_bce = j.value("lambda_bce", c.lambda_bce);
  c.lambda_clr = j.value("lambda_clr", c.lambda_clr);
  c.lambda_cons = j.value("lambda_cons", c.lambda_cons);
  c.include_positive_in_denominator =
      j.value("include_positive_in_denominator", c.include_positive_in_denominator);
  return c;
}

inline json to_json(const augment::CopyPasteSpec& s) {
  return json{{"patch_h_min", s.patch_h_min}, {"patch_h_max", s.patch_h_max},
              {"patch_w_min", s.patch_w_min}, {"patch_w_max", s.patch_w_max},
              {"min_displacement", s.min_displacement}, {"num_patches", s.num_patches}};
}

inline augment::CopyPasteSpec copy_paste_from_json(const json& j) {
  detail::check_keys(j,
                     {"patch_h_min", "patch_h_max", "patch_w_min", "patch_w_max",
                      "min_displacement", "num_patches"},
                     "copy_paste");
  augment::CopyPasteSpec s;
  s.patch_h_min = j.value("patch_h_min", s.patch_h_min);
  s.patch_h_max = j.value("patch_h_max", s.patch_h_max);
  s.patch_w_min = j.value("patch_w_min", s.patch_w_min);
  s.patch_w_max = j.value("patch_w_max", s.patch_w_max);
  s.min_displacement = j.value("min_displacement", s.min_displacement);
  s.num_patches = j.value("num_patches", s.num_patches);
  return s;
}

inline json to_json(const augment::PhotometricSpec& s) {
  return json{{"noise_sigma", s.noise_sigma},
              {"contrast_lo", s.contrast_lo},     {"contrast_hi", s.contrast_hi},
              {"brightness_lo", s.brightness_lo}, {"brightness_hi", s.brightness_hi}};
}

inline augment::PhotometricSpec photometric_from_json(const json& j) {
  detail::check_keys(
      j, {"noise_sigma", "contrast_lo", "contrast_hi", "brightness_lo", "brightness_hi"},
      "photometric");
  augment::PhotometricSpec s;
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.contrast_lo = j.value("contrast_lo", s.contrast_lo);
  s.contrast_hi = j.value("contrast_hi", s.contrast_hi);
  s.brightness_lo = j.value("brightness_lo", s.brightness_lo);
  s.brightness_hi = j.value("brightness_hi", s.brightness_hi);
  return s;
}

inline json to_json(const TrainConfig& c) {
  return json{{"version", 1},
              {"mode", to_string(c.mode)},
              {"manifest", c.manifest_path},
              {"out_dir", c.out_dir},
              {"net", net::to_json(c.net)},
              {"loss", to_json(c.loss)},
              {"learning_rate", c.learning_rate},
              {"steps", c.steps},
              {"batch_size", c.batch_size},
              {"copy_paste", to_json(c.copy_paste)},
              {"photometric", to_json(c.photometric)},
              {"seed", c.seed},
              {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const json& j) {
  detail::check_keys(j,
                     {"version", "mode", "manifest", "out_dir", "net", "loss", "learning_rate",
                      "steps", "batch_size", "copy_paste", "photometric", "seed",
                      "checkpoint_every"},
                     "train config");
  int version = j.value("version", 1);
  if (version != 1)
    throw ConfigError("config: unsupported schema version " + std::to_string(version));
  TrainConfig c;
  if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
  c.manifest_path = j.value("manifest", c.manifest_path);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("net")) {
    detail::check_keys(j.at("net"),
                       {"depth", "base_channels", "embed_dim", "in_channels", "gn_groups",
                        "embed_from_low"},
                       "net");
    c.net = net::net_config_from_json(j.at("net"));
  }
  if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("copy_paste")) c.copy_paste = copy_paste_from_json(j.at("copy_paste"));
  if (j.contains("photometric")) c.photometric = photometric_from_json(j.at("photometric"));
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.apply_mode_defaults();
  return c;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw EnvironmentError("load_train_config: cannot open " + path);
  json j;
  in >> j;
  return train_config_from_json(j);
}

struct RunRecord {
  std::vector<losses::LossBreakdown> step_losses;  // one entry per update step
  std::string checkpoint_path;
  double wall_seconds = 0.0;
  std::string config_digest;
};

namespace detail {

inline void require_finite(double v, const char* term, int step) {
  if (!std::isfinite(v))
    throw ConfigError("train: non-finite " + std::string(term) + " loss at step " +
                      std::to_string(step));
}

struct TrainData {
  std::vector<GrayImage> images;
};

inline TrainData load_train_split(const simgen::Manifest& m, const std::string& manifest_path) {
  namespace fs = std::filesystem;
  fs::path root = fs::path(manifest_path).parent_path();
  TrainData data;
  for (const simgen::ManifestRecord* r : m.split("train"))
    data.images.push_back(load_image((root / r->image_path).string()).pixels);
  if (data.images.empty())
    throw ConfigError("train: manifest has no records in the 'train' split");
  return data;
}

}  // namespace detail

// One optimization step's worth of batch data.
struct Batch {
  Tensor input;           // (B, C_in, H, W)
  Tensor aug_input;       // photometric view, only in dclr mode
  Tensor mask;            // (B, 1, H, W)
  Tensor weights;         // (B, 1, H, W)
};

namespace detail {

inline Batch make_batch(const TrainData& data, const TrainConfig& cfg, int step,
                        std::mt19937_64& rng) {
  const int B = cfg.batch_size;
  const GrayImage& first = data.images.front();
  const int H = first.rows(), W = first.cols();
  const int C = cfg.net.in_channels;
  Batch batch{Tensor(B, C, H, W), Tensor(), Tensor(B, 1, H, W), Tensor(B, 1, H, W)};
  const bool dclr = cfg.mode == TrainMode::wbce_dclr;
  if (dclr) batch.aug_input = Tensor(B, C, H, W);

  std::uniform_int_distribution<size_t> pick(0, data.images.size() - 1);
  for (int b = 0; b < B; ++b) {
    const GrayImage& clean = data.images[pick(rng)];
    uint64_t aug_seed = mix_seed(cfg.seed, 0x61750000ULL + static_cast<uint64_t>(step) *
                                               cfg.batch_size + b);
    auto [implanted, mask] = augment::copy_paste(SemImage{clean, 0}, cfg.copy_paste, aug_seed);
    augment::WeightMap wm = augment::weight_map(mask);

    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        batch.input.at(b, 0, r, c) = implanted.pixels.at(r, c);
        if (C == 2) batch.input.at(b, 1, r, c) = clean.at(r, c);  // ref channel
        batch.mask.at(b, 0, r, c) = mask.labels.at(r, c);
        batch.weights.at(b, 0, r, c) = wm.weights.at(r, c);
      }
    if (dclr) {
      SemImage view = augment::photometric(implanted, cfg.photometric,
                                           mix_seed(aug_seed, 0x7066));
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) {
          batch.aug_input.at(b, 0, r, c) = view.pixels.at(r, c);
          if (C == 2) batch.aug_input.at(b, 1, r, c) = clean.at(r, c);
        }
    }
  }
  return batch;
}

}  // namespace detail

// Trains a model per the config, writing checkpoints and a JSONL training log
// (step, loss terms, learning rate) under cfg.out_dir. The returned record
// carries the per-step loss breakdown and the final checkpoint path.
// The trained model is also returned through `model_out` when non-null, so
// callers can run inference without a reload.
inline RunRecord train(TrainConfig cfg, std::optional<net::UNet>* model_out = nullptr) {
  cfg.apply_mode_defaults();
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw EnvironmentError("train: cannot create " + cfg.out_dir);

  auto t0 = std::chrono::steady_clock::now();
  simgen::Manifest manifest = simgen::load_manifest(cfg.manifest_path);
  detail::TrainData data = detail::load_train_split(manifest, cfg.manifest_path);

  RunRecord rec;
  rec.config_digest = detail::fnv1a_hex(to_json(cfg).dump());

  net::UNet model(cfg.net, mix_seed(cfg.seed, 0x6d6f64));
  nn::Adam opt(model.params(), cfg.learning_rate);

  // Consistency mode co-trains an identically shaped, differently initialized
  // teacher on its own supervised loss; the student additionally matches it.
  const bool use_teacher = cfg.mode == TrainMode::wbce_consistency;
  const bool use_dclr = cfg.mode == TrainMode::wbce_dclr;
  std::optional<net::UNet> teacher;
  std::optional<nn::Adam> teacher_opt;
  if (use_teacher) {
    teacher.emplace(cfg.net, mix_seed(cfg.seed, 0x746561));
    teacher_opt.emplace(teacher->params(), cfg.learning_rate);
  }

  std::ofstream log(fs::path(cfg.out_dir) / "train_log.jsonl");
  if (!log) throw EnvironmentError("train: cannot write training log in " + cfg.out_dir);

  auto rng = make_rng(cfg.seed, 0x626174);
  for (int step = 0; step < cfg.steps; ++step) {
    Batch batch = detail::make_batch(data, cfg, step, rng);

    opt.zero_grad();
    nn::Graph g;
    net::ForwardOutput out = model.forward(g, batch.input);
    int emb = -1, emb_aug = -1;
    if (use_dclr) {
      net::ForwardOutput out_aug = model.forward(g, batch.aug_input);
      emb = model.project(g, out);
      emb_aug = model.project(g, out_aug);
    }

    // Teacher does its own forward/backward on the same batch.
    nn::Graph tg;
    Tensor teacher_prob;
    if (use_teacher) {
      teacher_opt->zero_grad();
      net::ForwardOutput tout = teacher->forward(tg, batch.input);
      teacher_prob = tg.value(tout.prob_map);
      Tensor tgp = teacher_prob.zeros_like();
      double tl = losses::weighted_bce(teacher_prob, batch.mask, batch.weights,
                                       cfg.loss.clamp_eps, &tgp);
      detail::require_finite(tl, "teacher wbce", step);
      tg.grad(tout.prob_map) = tgp;
      tg.backward();
      teacher_opt->step();
    }

    losses::TotalLossInputs in;
    in.prob = &g.value(out.prob_map);
    in.mask = &batch.mask;
    in.weights = &batch.weights;
    in.seed = mix_seed(cfg.seed, 0x636c7200ULL + step);
    if (use_dclr) {
      in.embeds = &g.value(emb);
      in.aug_embeds = &g.value(emb_aug);
    }
    if (use_teacher) in.teacher_prob = &teacher_prob;

    Tensor gp = in.prob->zeros_like();
    Tensor ge, ga;
    losses::TotalLossGrads grads;
    grads.prob = &gp;
    if (use_dclr) {
      ge = in.embeds->zeros_like();
      ga = in.aug_embeds->zeros_like();
      grads.embeds = &ge;
      grads.aug_embeds = &ga;
    }
    losses::LossBreakdown bd = losses::total_loss(in, cfg.loss, grads);
    detail::require_finite(bd.bce, "wbce", step);
    detail::require_finite(bd.clr, "dense_clr", step);
    detail::require_finite(bd.cons, "consistency", step);
    detail::require_finite(bd.total, "total", step);

    g.grad(out.prob_map) = gp;
    if (use_dclr) {
      g.grad(emb) = ge;
      g.grad(emb_aug) = ga;
    }
    g.backward();
    opt.step();

    rec.step_losses.push_back(bd);
    log << json{{"step", step}, {"total", bd.total}, {"bce", bd.bce}, {"clr", bd.clr},
                {"cons", bd.cons}, {"lr", opt.lr()}}
               .dump()
        << "\n";

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.steps) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%06d.ckpt", step + 1);
      model.save((fs::path(cfg.out_dir) / name).string());
    }
  }

  rec.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint_final.ckpt").string();
  model.save(rec.checkpoint_path);
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::ofstream rj(fs::path(cfg.out_dir) / "run_record.json");
  rj << json{{"checkpoint", rec.checkpoint_path},
             {"wall_seconds", rec.wall_seconds},
             {"config_digest", rec.config_digest},
             {"steps", static_cast<int>(rec.step_losses.size())}}
            .dump(2)
     << "\n";

  if (model_out) model_out->emplace(std::move(model));
  return rec;
}

// Inference on one capture. In two-channel (ref-def) mode the reference is
// registered onto the defect frame by phase correlation before stacking.
struct InferResult {
  GrayImage prob_map;
  detect::DetectionSet detections;
};

inline InferResult infer_one(net::UNet& model, const SemImage& img,
                             const SemImage* ref = nullptr, double threshold = 0.5,
                             int min_area = 4) {
  const net::NetConfig& cfg = model.config();
  Tensor x(1, cfg.in_channels, img.rows(), img.cols());
  for (int r = 0; r < img.rows(); ++r)
    for (int c = 0; c < img.cols(); ++c) x.at(0, 0, r, c) = img.pixels.at(r, c);
  if (cfg.in_channels == 2) {
    if (!ref)
      throw ConfigError("infer: checkpoint expects a reference channel but none was given");
    SemImage aligned = classic::register_image(*ref, classic::phase_correlate(*ref, img));
    for (int r = 0; r < img.rows(); ++r)
      for (int c = 0; c < img.cols(); ++c) x.at(0, 1, r, c) = aligned.pixels.at(r, c);
  }
  nn::Graph g;
  net::ForwardOutput out = model.forward(g, x);
  InferResult res;
  res.prob_map = g.value(out.prob_map).to_image();
  res.detections = detect::detect(res.prob_map, threshold, min_area);
  return res;
}

inline json detections_to_json(const std::string& image_path,
                               const detect::DetectionSet& ds) {
  json dets = json::array(), filt = json::array();
  for (const auto& d : ds.detections) dets.push_back(detect::to_json(d));
  for (const auto& d : ds.filtered) filt.push_back(detect::to_json(d));
  return json{{"image", image_path}, {"detections", std::move(dets)},
              {"filtered", std::move(filt)}};
}

inline detect::DetectionSet detections_from_json(const json& j) {
  detect::DetectionSet ds;
  for (const auto& jd : j.at("detections")) ds.detections.push_back(detect::detection_from_json(jd));
  if (j.contains("filtered"))
    for (const auto& jd : j.at("filtered")) ds.filtered.push_back(detect::detection_from_json(jd));
  return ds;
}

// Runs the model over the manifest's test split: probability-map PNGs and one
// detection record per line in detections.jsonl under out_dir.
inline std::vector<InferResult> infer(net::UNet& model, const simgen::Manifest& m,
                                      const std::string& manifest_path,
                                      const std::string& out_dir,
                                      double threshold = 0.5, int min_area = 4) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw EnvironmentError("infer: cannot create " + out_dir);
  fs::path root = fs::path(manifest_path).parent_path();

  std::ofstream jsonl(fs::path(out_dir) / "detections.jsonl");
  if (!jsonl) throw EnvironmentError("infer: cannot write detections.jsonl in " + out_dir);

  std::vector<InferResult> all;
  int idx = 0;
  for (const simgen::ManifestRecord* r : m.split("test")) {
    SemImage img = load_image((root / r->image_path).string());
    std::optional<SemImage> ref;
    if (model.config().in_channels == 2) {
      if (r->ref_path.empty())
        throw ConfigError("infer: ref-def checkpoint but manifest record lacks a reference");
      ref = load_image((root / r->ref_path).string());
    }
    InferResult res = infer_one(model, img, ref ? &*ref : nullptr, threshold, min_area);
    char name[64];
    std::snprintf(name, sizeof(name), "prob_%04d.png", idx++);
    save_image((fs::path(out_dir) / name).string(), SemImage{res.prob_map, r->seed});
    jsonl << detections_to_json(r->image_path, res.detections).dump() << "\n";
    all.push_back(std::move(res));
  }
  return all;
}

struct ExperimentConfig {
  simgen::DatasetConfig dataset;
  TrainConfig train;
  std::string out_dir = "experiment";
  double threshold = 0.5;  // operating point for headline metrics
  int min_area = 4;
  std::vector<double> pr_grid = {0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5,
                                 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95};
  bool classic_baseline = false;  // always on in ref-def mode
  double classic_k_sigma = 5.0;
  int classic_min_area = 4;
};

struct ExperimentSummary {
  evalkit::MatchReport report;
  double precision = 0.0, recall = 0.0, f = 0.0;
  evalkit::PRCurve curve;
  RunRecord run;
  bool classic_run = false;
  evalkit::MatchReport classic_report;
  double classic_precision = 0.0, classic_recall = 0.0, classic_f = 0.0;
};

// The desk-scale preset: 200 clean 64x64 training images, 50 defect/mask/ref
// test triples with easy high-contrast particles, and a small U-net trained
// with copy-paste augmentation.
inline ExperimentConfig easy_preset(TrainMode mode, const std::string& out_dir,
                                    uint64_t seed = 7) {
  ExperimentConfig cfg;
  cfg.out_dir = out_dir;
  cfg.dataset.base_seed = seed;
  cfg.train.mode = mode;
  cfg.train.out_dir = out_dir + "/train";
  cfg.train.seed = seed;
  cfg.train.steps = 800;
  cfg.train.batch_size = 4;
  cfg.train.learning_rate = 2e-3;
  cfg.train.net.depth = 3;
  cfg.train.net.base_channels = 8;
  cfg.train.net.embed_dim = 8;
  cfg.train.net.gn_groups = 4;
  cfg.train.loss.pixel_sample_budget = 32;
  cfg.train.copy_paste.patch_h_min = 4;
  cfg.train.copy_paste.patch_h_max = 10;
  cfg.train.copy_paste.patch_w_min = 4;
  cfg.train.copy_paste.patch_w_max = 10;
  cfg.train.copy_paste.min_displacement = 8;
  cfg.train.apply_mode_defaults();
  if (mode == TrainMode::ref_def) cfg.classic_baseline = true;
  return cfg;
}

namespace detail {

template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("experiment stage '") + name + "': " + e.what());
  }
}

}  // namespace detail

// generate -> train -> infer -> evaluate, writing all artifacts under
// cfg.out_dir: the dataset, training log and checkpoint, probability maps and
// detections, metrics.json, pr.csv, and pr.png.
inline ExperimentSummary run_experiment(ExperimentConfig cfg) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw EnvironmentError("run_experiment: cannot create " + cfg.out_dir);

  std::string dataset_dir = (fs::path(cfg.out_dir) / "dataset").string();
  std::string manifest_path = (fs::path(dataset_dir) / "manifest.json").string();
  simgen::Manifest manifest = detail::stage("generate", [&] {
    if (fs::exists(manifest_path)) return simgen::load_manifest(manifest_path);
    return simgen::gen_dataset(cfg.dataset, dataset_dir);
  });

  ExperimentSummary summary;
  cfg.train.manifest_path = manifest_path;
  if (cfg.train.out_dir.empty()) cfg.train.out_dir = (fs::path(cfg.out_dir) / "train").string();
  std::optional<net::UNet> trained;
  summary.run = detail::stage("train", [&] { return train(cfg.train, &trained); });

  // Reload from the checkpoint so every experiment exercises the round trip.
  net::UNet model = detail::stage(
      "train", [&] { return net::UNet::load(summary.run.checkpoint_path); });

  std::string infer_dir = (fs::path(cfg.out_dir) / "infer").string();
  std::vector<InferResult> results = detail::stage("infer", [&] {
    return infer(model, manifest, manifest_path, infer_dir, cfg.threshold, cfg.min_area);
  });

  detail::stage("evaluate", [&] {
    fs::path root = fs::path(manifest_path).parent_path();
    evalkit::MatchCriteria criteria;
    std::vector<std::vector<evalkit::GtRegion>> gts;
    for (const simgen::ManifestRecord* r : manifest.split("test"))
      gts.push_back(evalkit::gt_regions_from_mask(load_mask((root / r->mask_path).string())));

    bool classic = cfg.classic_baseline || cfg.train.mode == TrainMode::ref_def;
    for (size_t i = 0; i < results.size(); ++i) {
      const detect::DetectionSet& ds = results[i].detections;
      summary.report += evalkit::match(ds.detections, static_cast<int>(ds.filtered.size()),
                                       gts[i], criteria);
    }
    std::tie(summary.precision, summary.recall) = evalkit::precision_recall(summary.report);
    summary.f = evalkit::f_measure(summary.precision, summary.recall);

    // Candidates for the PR sweep come from the lowest grid threshold; the
    // sweep then filters them by score, which keeps recall monotone.
    double sweep_t = cfg.pr_grid.empty() ? cfg.threshold : cfg.pr_grid.front();
    std::vector<detect::DetectionSet> sweep_dets;
    for (const InferResult& r : results)
      sweep_dets.push_back(detect::detect(r.prob_map, std::min(sweep_t, cfg.threshold),
                                          cfg.min_area));
    summary.curve = evalkit::pr_curve(sweep_dets, gts, criteria, cfg.pr_grid);
    evalkit::emit_csv(summary.curve, (fs::path(cfg.out_dir) / "pr.csv").string());
    evalkit::emit_plot(summary.curve, (fs::path(cfg.out_dir) / "pr.png").string());

    json metrics{{"mode", to_string(cfg.train.mode)},
                 {"threshold", cfg.threshold},
                 {"precision", summary.precision},
                 {"recall", summary.recall},
                 {"f_measure", summary.f},
                 {"report", evalkit::to_json(summary.report)},
                 {"train_wall_seconds", summary.run.wall_seconds},
                 {"config_digest", summary.run.config_digest}};

    if (classic) {
      summary.classic_run = true;
      auto test = manifest.split("test");
      for (size_t i = 0; i < test.size(); ++i) {
        SemImage ref = load_image((root / test[i]->ref_path).string());
        SemImage def = load_image((root / test[i]->image_path).string());
        detect::DetectionSet ds =
            classic::baseline_detect(ref, def, cfg.classic_k_sigma, cfg.classic_min_area);
        summary.classic_report += evalkit::match(
            ds.detections, static_cast<int>(ds.filtered.size()), gts[i], criteria);
      }
      std::tie(summary.classic_precision, summary.classic_recall) =
          evalkit::precision_recall(summary.classic_report);
      summary.classic_f =
          evalkit::f_measure(summary.classic_precision, summary.classic_recall);
      metrics["classic"] = json{{"precision", summary.classic_precision},
                                {"recall", summary.classic_recall},
                                {"f_measure", summary.classic_f},
                                {"report", evalkit::to_json(summary.classic_report)}};
      // Side-by-side table, one row per method.
      std::ofstream table(fs::path(cfg.out_dir) / "comparison.csv");
      table << "method,precision,recall,f_measure\n";
      table << "learned," << summary.precision << "," << summary.recall << "," << summary.f
            << "\n";
      table << "classic-ref-def," << summary.classic_precision << ","
            << summary.classic_recall << "," << summary.classic_f << "\n";
    }

    std::ofstream mj(fs::path(cfg.out_dir) / "metrics.json");
    if (!mj) throw EnvironmentError("run_experiment: cannot write metrics.json");
    mj << metrics.dump(2) << "\n";
    return 0;
  });

  return summary;
}

}  // namespace semdefect::pipeline
