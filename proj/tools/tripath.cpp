// tripath command-line front end.

#include <CLI11.hpp>

#include <iostream>

#include "tripath/harness.hpp"

using namespace tripath;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = false) {
  auto* opt = cmd->add_option("--config", c.config, "run configuration (JSON)");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  else opt->check(CLI::ExistingFile);
  cmd->add_option_function<std::uint64_t>("--seed", [&c](std::uint64_t s) { c.seed = s; c.seed_set = true; }, "random seed");
  cmd->add_option("--out", c.out, "output directory");
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed_set) cfg.seed = c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  return cfg;
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

std::string require_out(const Common& c, const std::string& fallback) { return c.out.empty() ? fallback : c.out; }

// The dataset root for commands that start from a checkpoint: --data wins,
// then the --config file, then the root recorded at training time.
DatasetManifest checkpoint_manifest(const CheckpointInfo& info, const Common& c, const std::string& data,
                                    const std::string& split) {
  std::string root = info.config.data.root;
  if (!c.config.empty()) {
    const RunConfig rc = load_run_config(c.config);
    if (!rc.data.root.empty()) root = rc.data.root;
  }
  if (!data.empty()) root = data;
  DatasetManifest m = load_manifest(root, split);
  if (m.num_classes != info.model.num_classes)
    throw ShapeMismatch("num_classes", "checkpoint has " + std::to_string(info.model.num_classes) + ", dataset has " +
                                           std::to_string(m.num_classes));
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tri-path change detection: synthetic data, training, evaluation and analysis"};
  app.require_subcommand(1);

  // synth
  Common synth_c;
  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "write a deterministic synthetic dataset");
  add_common(synth, synth_c);
  synth->add_option("--count", so.count, "training pairs")->capture_default_str();
  synth->add_option("--val", so.val_count, "validation pairs")->capture_default_str();
  synth->add_option("--test", so.test_count, "test pairs")->capture_default_str();
  synth->add_option("--size", so.size, "image side in pixels")->capture_default_str();
  synth->add_option("--classes", so.num_classes, "number of change classes N")->capture_default_str();

  // train
  Common train_c;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd, train_c, true);

  // eval
  Common eval_c;
  std::string eval_ckpt, eval_data, eval_split = "val";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "dataset root");
  eval->add_option("--split", eval_split)->capture_default_str();

  // ablate
  Common ablate_c;
  auto* ablate_cmd = app.add_subcommand("ablate", "run the {baseline, +MLHA, +Path+MLHA} grid");
  add_common(ablate_cmd, ablate_c, true);

  // predict
  Common pred_c;
  std::string pred_ckpt, pred_data, pred_split = "test";
  auto* pred = app.add_subcommand("predict", "export class masks and comparison images");
  add_common(pred, pred_c);
  pred->add_option("--checkpoint", pred_ckpt)->required()->check(CLI::ExistingFile);
  pred->add_option("--data", pred_data, "dataset root");
  pred->add_option("--split", pred_split)->capture_default_str();

  // gradcam
  Common cam_c;
  std::string cam_ckpt, cam_data, cam_split = "train", cam_sample, cam_path = "both";
  int cam_class = 1;
  auto* cam = app.add_subcommand("gradcam", "Grad-CAM heatmaps for one sample");
  add_common(cam, cam_c);
  cam->add_option("--checkpoint", cam_ckpt)->required()->check(CLI::ExistingFile);
  cam->add_option("--data", cam_data, "dataset root");
  cam->add_option("--split", cam_split)->capture_default_str();
  cam->add_option("--sample", cam_sample, "sample id (default: first of the split)");
  cam->add_option("--class", cam_class, "target class")->capture_default_str();
  cam->add_option("--path", cam_path, "backbone, third_path or both")
      ->check(CLI::IsMember({"backbone", "third_path", "both"}))
      ->capture_default_str();

  // metrics
  Common met_c;
  std::string met_pred, met_data, met_split = "val";
  auto* met = app.add_subcommand("metrics", "score a directory of predicted masks");
  add_common(met, met_c);
  met->add_option("--pred", met_pred, "directory of <id>.png class masks")->required()->check(CLI::ExistingDirectory);
  met->add_option("--data", met_data, "dataset root")->required();
  met->add_option("--split", met_split)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      if (!synth_c.config.empty()) {
        const RunConfig rc = load_run_config(synth_c.config);
        so.patch_size = rc.model.backbone.patch_size;
        so.seed = rc.seed;
        if (rc.model.num_classes > 0) so.num_classes = rc.model.num_classes;
        if (synth_c.out.empty()) synth_c.out = rc.data.root;
      }
      if (synth_c.seed_set) so.seed = synth_c.seed;
      const std::string out = require_out(synth_c, "data/synth");
      const DatasetManifest m = synth_dataset(out, so);
      print_json({{"root", out}, {"train", m.entries.size()}, {"num_classes", m.num_classes}});
    } else if (*train_cmd) {
      const RunConfig cfg = resolve_config(train_c);
      const TrainData data = load_train_data(cfg.data);
      auto model = build_model<float>(cfg, resolve_model(cfg, &data.train_manifest));
      const TrainOutcome t = train(cfg, *model, data);
      print_json({{"steps", t.steps},
                  {"initial_loss", t.step_losses.front()},
                  {"final_loss", t.step_losses.back()},
                  {"best_epoch", t.best_epoch},
                  {"best_mIoU", score_json(t.best_miou)},
                  {"frozen_fingerprint", hex64(t.fingerprint_after)},
                  {"best_checkpoint", t.best_checkpoint.string()},
                  {"log", t.log_path.string()}});
    } else if (*eval) {
      auto [model, info] = model_from_checkpoint<float>(eval_ckpt);
      const DatasetManifest m = checkpoint_manifest(info, eval_c, eval_data, eval_split);
      const json report = to_json(evaluate(*model, load_split(m), info.config.data.norm, info.config.optim.batch_size,
                                           m.class_names));
      if (!eval_c.out.empty()) {
        fs::create_directories(eval_c.out);
        std::ofstream(fs::path(eval_c.out) / "metrics.json") << report.dump(2) << '\n';
      }
      print_json(report);
    } else if (*ablate_cmd) {
      const RunConfig cfg = resolve_config(ablate_c);
      const auto rows = ablate<float>(cfg);
      std::cout << ablation_table(rows);
    } else if (*pred) {
      auto [model, info] = model_from_checkpoint<float>(pred_ckpt);
      const DatasetManifest m = checkpoint_manifest(info, pred_c, pred_data, pred_split);
      const std::string out = require_out(pred_c, "predictions");
      const std::size_t n = predict(*model, m, info.config.data.norm, out, info.config.optim.batch_size);
      print_json({{"written", n}, {"out", out}, {"comparison_images", m.labeled}});
    } else if (*cam) {
      auto [model, info] = model_from_checkpoint<float>(cam_ckpt);
      const DatasetManifest m = checkpoint_manifest(info, cam_c, cam_data, cam_split);
      if (m.entries.empty()) throw MissingFile(cam_split, "split has no entries");
      const ImagePair p = load_pair(m, cam_sample.empty() ? m.entries.front() : cam_sample);
      const Batch<float> b = collate<float>({p}, {0}, info.config.data.norm);
      const std::string out = require_out(cam_c, "gradcam");
      json written = json::array();
      std::vector<CamPath> paths;
      if (cam_path != "third_path") paths.push_back(CamPath::Backbone);
      if (cam_path != "backbone") paths.push_back(CamPath::ThirdPath);
      for (CamPath path : paths) {
        const Heatmap h = gradcam(*model, b.t1, b.t2, cam_class, path);
        const std::string stem = p.sample_id + "_class" + std::to_string(cam_class) + "_" + cam_path_name(path);
        write_png(fs::path(out) / (stem + "_gray.png"), heatmap_gray(h));
        write_png(fs::path(out) / (stem + "_overlay.png"), heatmap_overlay(h, p.t2));
        written.push_back(stem);
      }
      print_json({{"sample", p.sample_id}, {"class", cam_class}, {"heatmaps", written}, {"out", out}});
    } else if (*met) {
      const DatasetManifest m = load_manifest(met_data, met_split);
      const json report = to_json(make_report(confusion_from_directory(met_pred, m), m.class_names));
      if (!met_c.out.empty()) {
        fs::create_directories(met_c.out);
        std::ofstream(fs::path(met_c.out) / "metrics.json") << report.dump(2) << '\n';
      }
      print_json(report);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
