// Command-line front end: dataset generation, training, inference, the
// classic reference-vs-defect baseline, evaluation, PR plotting, and the
// one-command end-to-end experiment.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "semdefect/pipeline.hpp"

namespace fs = std::filesystem;
using namespace semdefect;

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw EnvironmentError("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

// Shared evaluation core: detections per test image + manifest masks in, a
// metrics file, PR data, and a plot out.
int evaluate_detections(const std::vector<detect::DetectionSet>& dets,
                        const simgen::Manifest& manifest, const std::string& manifest_path,
                        const std::string& out_dir, const std::vector<double>& grid) {
  fs::create_directories(out_dir);
  fs::path root = fs::path(manifest_path).parent_path();
  evalkit::MatchCriteria criteria;
  auto test = manifest.split("test");
  if (dets.size() != test.size())
    throw ConfigError("evaluate: " + std::to_string(dets.size()) + " detection records vs " +
                      std::to_string(test.size()) + " test images in the manifest");

  std::vector<std::vector<evalkit::GtRegion>> gts;
  evalkit::MatchReport report;
  for (size_t i = 0; i < test.size(); ++i) {
    gts.push_back(evalkit::gt_regions_from_mask(load_mask((root / test[i]->mask_path).string())));
    report += evalkit::match(dets[i].detections, static_cast<int>(dets[i].filtered.size()),
                             gts[i], criteria);
  }
  evalkit::emit_metrics(report, (fs::path(out_dir) / "metrics.json").string());
  evalkit::PRCurve curve = evalkit::pr_curve(dets, gts, criteria, grid);
  evalkit::emit_csv(curve, (fs::path(out_dir) / "pr.csv").string());
  evalkit::emit_plot(curve, (fs::path(out_dir) / "pr.png").string());

  auto [p, r] = evalkit::precision_recall(report);
  std::cout << "precision " << p << "  recall " << r << "  f " << evalkit::f_measure(p, r)
            << "  (hits " << report.hits << ", misses " << report.misses << ", false alarms "
            << report.false_alarms << ", filtered " << report.filtered << ")\n";
  return 0;
}

std::vector<double> default_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 19; ++i) g.push_back(0.05 * i);
  return g;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic SEM defect segmentation and detection toolkit"};
  app.require_subcommand(1);

  // generate ----------------------------------------------------------------
  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset with a manifest");
  std::string gen_out = "dataset", gen_config;
  int gen_train = 200, gen_test = 50;
  uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "Output directory");
  gen->add_option("--config", gen_config, "Dataset config JSON (overrides other flags)");
  gen->add_option("--train-count", gen_train, "Clean training images");
  gen->add_option("--test-count", gen_test, "Defect/mask/reference test triples");
  gen->add_option("--seed", gen_seed, "Base seed");

  // train ---------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train a segmentation model");
  std::string tr_config, tr_mode, tr_manifest, tr_out;
  int tr_steps = -1, tr_batch = -1;
  double tr_lr = -1.0;
  uint64_t tr_seed = 0;
  bool tr_seed_set = false;
  tr->add_option("--config", tr_config, "Train config JSON");
  tr->add_option("--mode", tr_mode, "wbce | wbce+dclr | wbce+consistency | ref-def");
  tr->add_option("--manifest", tr_manifest, "Dataset manifest path");
  tr->add_option("--out", tr_out, "Run output directory");
  tr->add_option("--steps", tr_steps, "Update steps");
  tr->add_option("--batch", tr_batch, "Batch size");
  tr->add_option("--lr", tr_lr, "Learning rate");
  tr->add_option("--seed", tr_seed, "Training seed")->each([&](const std::string&) {
    tr_seed_set = true;
  });

  // infer ---------------------------------------------------------------
  auto* inf = app.add_subcommand("infer", "Run a checkpoint over the manifest's test split");
  std::string inf_ckpt, inf_manifest, inf_out = "infer";
  double inf_threshold = 0.5;
  int inf_min_area = 4;
  inf->add_option("--checkpoint", inf_ckpt, "Model checkpoint")->required();
  inf->add_option("--manifest", inf_manifest, "Dataset manifest path")->required();
  inf->add_option("--out", inf_out, "Output directory");
  inf->add_option("--threshold", inf_threshold, "Binarization threshold");
  inf->add_option("--min-area", inf_min_area, "Minimum blob area");

  // baseline ------------------------------------------------------------
  auto* base = app.add_subcommand("baseline",
                                  "Classic register-and-diff baseline over the test split");
  std::string base_manifest, base_out = "baseline";
  double base_k = 5.0;
  int base_min_area = 4;
  base->add_option("--manifest", base_manifest, "Dataset manifest path")->required();
  base->add_option("--out", base_out, "Output directory");
  base->add_option("--k-sigma", base_k, "Robust threshold multiplier");
  base->add_option("--min-area", base_min_area, "Minimum blob area");

  // evaluate ------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "Score detection JSONL against manifest masks");
  std::string ev_dets, ev_manifest, ev_out = "eval";
  ev->add_option("--detections", ev_dets, "detections.jsonl path")->required();
  ev->add_option("--manifest", ev_manifest, "Dataset manifest path")->required();
  ev->add_option("--out", ev_out, "Output directory");

  // plot-pr -------------------------------------------------------------
  auto* plot = app.add_subcommand("plot-pr", "Render a PR curve from CSV");
  std::string plot_csv, plot_out = "pr.png";
  plot->add_option("--csv", plot_csv, "CSV with threshold,precision,recall")->required();
  plot->add_option("--out", plot_out, "Output PNG path");

  // experiment ----------------------------------------------------------
  auto* exp = app.add_subcommand("experiment", "End-to-end generate/train/infer/evaluate");
  std::string exp_mode = "wbce", exp_out = "experiment";
  uint64_t exp_seed = 7;
  int exp_steps = -1;
  exp->add_option("--mode", exp_mode, "wbce | wbce+dclr | wbce+consistency | ref-def");
  exp->add_option("--out", exp_out, "Output directory");
  exp->add_option("--seed", exp_seed, "Experiment seed");
  exp->add_option("--steps", exp_steps, "Override training steps");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      simgen::DatasetConfig cfg;
      if (!gen_config.empty()) {
        cfg = simgen::dataset_config_from_json(read_json(gen_config));
      } else {
        cfg.train_count = gen_train;
        cfg.test_count = gen_test;
        cfg.base_seed = gen_seed;
      }
      simgen::Manifest m = simgen::gen_dataset(cfg, gen_out);
      std::cout << "wrote " << m.records.size() << " records under " << gen_out << "\n";
    } else if (tr->parsed()) {
      pipeline::TrainConfig cfg;
      if (!tr_config.empty()) cfg = pipeline::load_train_config(tr_config);
      if (!tr_mode.empty()) cfg.mode = pipeline::mode_from_string(tr_mode);
      if (!tr_manifest.empty()) cfg.manifest_path = tr_manifest;
      if (!tr_out.empty()) cfg.out_dir = tr_out;
      if (tr_steps >= 0) cfg.steps = tr_steps;
      if (tr_batch > 0) cfg.batch_size = tr_batch;
      if (tr_lr > 0) cfg.learning_rate = tr_lr;
      if (tr_seed_set) cfg.seed = tr_seed;
      cfg.apply_mode_defaults();
      pipeline::RunRecord rec = pipeline::train(cfg);
      std::cout << "trained " << rec.step_losses.size() << " steps in " << rec.wall_seconds
                << " s; checkpoint " << rec.checkpoint_path << "\n";
    } else if (inf->parsed()) {
      net::UNet model = net::UNet::load(inf_ckpt);
      simgen::Manifest m = simgen::load_manifest(inf_manifest);
      auto results =
          pipeline::infer(model, m, inf_manifest, inf_out, inf_threshold, inf_min_area);
      std::cout << "wrote " << results.size() << " probability maps and detections under "
                << inf_out << "\n";
    } else if (base->parsed()) {
      simgen::Manifest m = simgen::load_manifest(base_manifest);
      fs::path root = fs::path(base_manifest).parent_path();
      fs::create_directories(base_out);
      std::ofstream jsonl(fs::path(base_out) / "detections.jsonl");
      std::vector<detect::DetectionSet> dets;
      for (const simgen::ManifestRecord* r : m.split("test")) {
        if (r->ref_path.empty())
          throw ConfigError("baseline: manifest record lacks a reference image");
        SemImage ref = load_image((root / r->ref_path).string());
        SemImage def = load_image((root / r->image_path).string());
        detect::DetectionSet ds = classic::baseline_detect(ref, def, base_k, base_min_area);
        jsonl << pipeline::detections_to_json(r->image_path, ds).dump() << "\n";
        dets.push_back(std::move(ds));
      }
      return evaluate_detections(dets, m, base_manifest, base_out, default_grid());
    } else if (ev->parsed()) {
      simgen::Manifest m = simgen::load_manifest(ev_manifest);
      std::ifstream in(ev_dets);
      if (!in) throw EnvironmentError("cannot open " + ev_dets);
      std::vector<detect::DetectionSet> dets;
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        dets.push_back(pipeline::detections_from_json(nlohmann::json::parse(line)));
      }
      return evaluate_detections(dets, m, ev_manifest, ev_out, default_grid());
    } else if (plot->parsed()) {
      std::ifstream in(plot_csv);
      if (!in) throw EnvironmentError("cannot open " + plot_csv);
      std::string line;
      std::getline(in, line);
      if (line != "threshold,precision,recall")
        throw ConfigError("plot-pr: unexpected CSV header '" + line + "'");
      evalkit::PRCurve curve;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        evalkit::PRPoint p{};
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &p.threshold, &p.precision, &p.recall) != 3)
          throw ConfigError("plot-pr: malformed CSV line '" + line + "'");
        curve.points.push_back(p);
      }
      evalkit::emit_plot(curve, plot_out);
      std::cout << "wrote " << plot_out << "\n";
    } else if (exp->parsed()) {
      pipeline::ExperimentConfig cfg =
          pipeline::easy_preset(pipeline::mode_from_string(exp_mode), exp_out, exp_seed);
      if (exp_steps >= 0) cfg.train.steps = exp_steps;
      pipeline::ExperimentSummary s = pipeline::run_experiment(cfg);
      std::cout << "mode " << exp_mode << ": precision " << s.precision << "  recall "
                << s.recall << "  f " << s.f << "\n";
      if (s.classic_run)
        std::cout << "classic baseline: precision " << s.classic_precision << "  recall "
                  << s.classic_recall << "  f " << s.classic_f << "\n";
      std::cout << "artifacts under " << exp_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
