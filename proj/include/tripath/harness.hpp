#pragma once

// Experiment orchestration: run configuration, training loop, checkpoints,
// evaluation, prediction export, Grad-CAM and the ablation grid.

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include "tripath/data.hpp"
#include "tripath/loss.hpp"
#include "tripath/metrics.hpp"
#include "tripath/model.hpp"
#include "tripath/optim.hpp"

namespace tripath {

using nlohmann::json;

struct DataConfig {
  std::string root;
  std::string train_split = "train";
  std::string val_split = "val";  // falls back to train_split when empty
  bool augment = true;
  Normalization norm;
};

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int epochs = 30;
  int batch_size = 4;
  long max_steps = 0;  // 0: no cap
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  std::string backbone_weights;  // optional external base weights
  LossWeights loss;
  OptimConfig optim;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";

  RunConfig() {
    model.backbone.patch_size = 4;
    model.num_classes = 0;  // 0: taken from the dataset manifest
  }

  void validate() const {
    if (!(optim.lr > 0)) throw InvalidArg("optim.lr", "must be positive");
    if (optim.epochs < 1) throw InvalidArg("optim.epochs", "must be at least 1");
    if (optim.batch_size < 1) throw InvalidArg("optim.batch_size", "must be at least 1");
    if (optim.max_steps < 0) throw InvalidArg("optim.max_steps", "must be non-negative");
    loss.validate();
    model.backbone.validate();
  }
};

namespace detail {

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw FormatError(where, "expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw FormatError(where + "." + it.key(), "unknown configuration key");
}

template <class V>
void read_opt(const json& j, const char* key, V& dst) {
  if (j.contains(key)) dst = j.at(key).get<V>();
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  const auto& b = c.model.backbone;
  const auto& m = c.model;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"data",
       {{"root", c.data.root},
        {"train_split", c.data.train_split},
        {"val_split", c.data.val_split},
        {"augment", c.data.augment},
        {"mean", c.data.norm.mean},
        {"std", c.data.norm.stddev}}},
      {"model",
       {{"patch_size", b.patch_size},
        {"embed_dim", b.embed_dim},
        {"depth", b.depth},
        {"heads", b.heads},
        {"mlp_ratio", b.mlp_ratio},
        {"tap_layers", b.taps()},
        {"lora_rank", b.lora_rank},
        {"lora_alpha", b.lora_alpha},
        {"adapter_dim", b.adapter_dim},
        {"freeze_base", b.freeze_base},
        {"backbone_weights", c.backbone_weights},
        {"ft1_channels", m.ft1_channels},
        {"cnn_channels", m.cnn_channels},
        {"third_d_model", m.third_d_model},
        {"third_heads", m.third_heads},
        {"third_blocks", m.third_blocks},
        {"third_channels", m.third_channels},
        {"kernel_sizes", m.kernel_sizes},
        {"channel_reduction", m.channel_reduction},
        {"num_classes", m.num_classes},
        {"use_third_path", m.use_third_path},
        {"use_mlha", m.use_mlha}}},
      {"loss",
       {{"alpha", c.loss.alpha}, {"beta", c.loss.beta}, {"gamma_focal", c.loss.gamma_focal}, {"dice_smooth", c.loss.dice_smooth}}},
      {"optim",
       {{"algorithm", "adamw"},
        {"lr", c.optim.lr},
        {"weight_decay", c.optim.weight_decay},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps},
        {"epochs", c.optim.epochs},
        {"batch_size", c.optim.batch_size},
        {"max_steps", c.optim.max_steps}}},
  };
}

// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig run_config_from_json(const json& j) {
  using detail::read_opt;
  RunConfig c;
  try {
    detail::check_keys(j, "config", {"seed", "output_dir", "data", "model", "loss", "optim"});
    read_opt(j, "seed", c.seed);
    read_opt(j, "output_dir", c.output_dir);
    if (j.contains("data")) {
      const json& d = j["data"];
      detail::check_keys(d, "data", {"root", "train_split", "val_split", "augment", "mean", "std"});
      read_opt(d, "root", c.data.root);
      read_opt(d, "train_split", c.data.train_split);
      read_opt(d, "val_split", c.data.val_split);
      read_opt(d, "augment", c.data.augment);
      read_opt(d, "mean", c.data.norm.mean);
      read_opt(d, "std", c.data.norm.stddev);
    }
    if (j.contains("model")) {
      const json& m = j["model"];
      detail::check_keys(m, "model",
                         {"patch_size", "embed_dim", "depth", "heads", "mlp_ratio", "tap_layers", "lora_rank",
                          "lora_alpha", "adapter_dim", "freeze_base", "backbone_weights", "ft1_channels",
                          "cnn_channels", "third_d_model", "third_heads", "third_blocks", "third_channels",
                          "kernel_sizes", "channel_reduction", "num_classes", "use_third_path", "use_mlha"});
      auto& b = c.model.backbone;
      read_opt(m, "patch_size", b.patch_size);
      read_opt(m, "embed_dim", b.embed_dim);
      read_opt(m, "depth", b.depth);
      read_opt(m, "heads", b.heads);
      read_opt(m, "mlp_ratio", b.mlp_ratio);
      read_opt(m, "tap_layers", b.tap_layers);
      read_opt(m, "lora_rank", b.lora_rank);
      read_opt(m, "lora_alpha", b.lora_alpha);
      read_opt(m, "adapter_dim", b.adapter_dim);
      read_opt(m, "freeze_base", b.freeze_base);
      read_opt(m, "backbone_weights", c.backbone_weights);
      read_opt(m, "ft1_channels", c.model.ft1_channels);
      read_opt(m, "cnn_channels", c.model.cnn_channels);
      read_opt(m, "third_d_model", c.model.third_d_model);
      read_opt(m, "third_heads", c.model.third_heads);
      read_opt(m, "third_blocks", c.model.third_blocks);
      read_opt(m, "third_channels", c.model.third_channels);
      read_opt(m, "kernel_sizes", c.model.kernel_sizes);
      read_opt(m, "channel_reduction", c.model.channel_reduction);
      read_opt(m, "num_classes", c.model.num_classes);
      read_opt(m, "use_third_path", c.model.use_third_path);
      read_opt(m, "use_mlha", c.model.use_mlha);
    }
    if (j.contains("loss")) {
      const json& l = j["loss"];
      detail::check_keys(l, "loss", {"alpha", "beta", "gamma_focal", "dice_smooth"});
      read_opt(l, "alpha", c.loss.alpha);
      read_opt(l, "beta", c.loss.beta);
      read_opt(l, "gamma_focal", c.loss.gamma_focal);
      read_opt(l, "dice_smooth", c.loss.dice_smooth);
    }
    if (j.contains("optim")) {
      const json& o = j["optim"];
      detail::check_keys(o, "optim",
                         {"algorithm", "lr", "weight_decay", "beta1", "beta2", "eps", "epochs", "batch_size", "max_steps"});
      if (o.contains("algorithm") && o["algorithm"].get<std::string>() != "adamw")
        throw InvalidArg("optim.algorithm", "only adamw is supported");
      read_opt(o, "lr", c.optim.lr);
      read_opt(o, "weight_decay", c.optim.weight_decay);
      read_opt(o, "beta1", c.optim.beta1);
      read_opt(o, "beta2", c.optim.beta2);
      read_opt(o, "eps", c.optim.eps);
      read_opt(o, "epochs", c.optim.epochs);
      read_opt(o, "batch_size", c.optim.batch_size);
      read_opt(o, "max_steps", c.optim.max_steps);
    }
  } catch (const json::exception& e) {
    throw FormatError("config", e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const fs::path& path) { return run_config_from_json(detail::read_json(path)); }

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

// Resolves num_classes against the manifest (0 in the config means "ask the data").
inline ModelConfig resolve_model(const RunConfig& cfg, const DatasetManifest* manifest) {
  ModelConfig m = cfg.model;
  if (manifest) {
    if (m.num_classes == 0) m.num_classes = manifest->num_classes;
    else if (m.num_classes != manifest->num_classes)
      throw ShapeMismatch("num_classes", "config says " + std::to_string(m.num_classes) + ", manifest says " +
                                             std::to_string(manifest->num_classes));
  }
  if (m.num_classes < 1) throw InvalidArg("num_classes", "unknown; set model.num_classes or data.root");
  return m;
}

template <class T>
std::unique_ptr<TriPathModel<T>> build_model(const RunConfig& cfg, const ModelConfig& m) {
  auto model = std::make_unique<TriPathModel<T>>(m, cfg.seed);
  if (!cfg.backbone_weights.empty()) model->backbone().load_external_weights(cfg.backbone_weights);
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints: every non-frozen tensor under "model.<name>", optional
// optimizer moments under "optim.{m,v}.<name>", and a metadata block with
// the config snapshot and the frozen-weight fingerprint.

struct CheckpointInfo {
  RunConfig config;
  ModelConfig model;
  std::uint64_t frozen_fingerprint = 0;
  int epoch = 0;
  long step = 0;
  json best;
};

template <class T>
void save_checkpoint(const fs::path& path, const TriPathModel<T>& model, const AdamW<T>* opt, const RunConfig& cfg,
                     int epoch, long step, const json& best) {
  Archive a;
  a.metadata["format"] = "tripath-checkpoint";
  a.metadata["dtype"] = Archive::dtype_of<T>();
  a.metadata["config"] = to_json(cfg);
  a.metadata["model"] = to_json(cfg)["model"];
  a.metadata["model"]["num_classes"] = model.config().num_classes;
  a.metadata["frozen_fingerprint"] = hex64(model.frozen_fingerprint());
  a.metadata["epoch"] = epoch;
  a.metadata["step"] = step;
  a.metadata["best"] = best;
  for (const auto& p : model.parameters())
    if (p.role != Role::Frozen) a.put("model." + p.name, p.tensor);
  if (opt) opt->save_state(a);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  a.save(path);
}

inline CheckpointInfo read_checkpoint_info(const Archive& a, const std::string& where) {
  if (a.metadata.value("format", "") != "tripath-checkpoint") throw FormatError(where, "not a tripath checkpoint");
  CheckpointInfo info;
  json cfg = a.metadata.at("config");
  cfg["model"]["num_classes"] = a.metadata.at("model").at("num_classes");
  info.config = run_config_from_json(cfg);
  info.model = info.config.model;
  info.frozen_fingerprint = std::stoull(a.metadata.at("frozen_fingerprint").get<std::string>(), nullptr, 16);
  info.epoch = a.metadata.value("epoch", 0);
  info.step = a.metadata.value("step", 0L);
  info.best = a.metadata.value("best", json::object());
  return info;
}

// Restores non-frozen tensors into `model`; fails if the frozen weights the
// checkpoint was trained against are not the ones in `model`.
template <class T>
CheckpointInfo load_checkpoint(const fs::path& path, TriPathModel<T>& model, AdamW<T>* opt = nullptr) {
  const Archive a = Archive::load(path);
  CheckpointInfo info = read_checkpoint_info(a, path.string());
  if (model.frozen_fingerprint() != info.frozen_fingerprint)
    throw FormatError(path.string(), "frozen fingerprint " + hex64(model.frozen_fingerprint()) + " does not match " +
                                         hex64(info.frozen_fingerprint));
  auto params = model.parameters();
  for (auto& p : params)
    if (p.role != Role::Frozen && !a.contains("model." + p.name)) throw MissingTensor("model." + p.name);
  for (auto& p : params)
    if (p.role != Role::Frozen) a.get_into("model." + p.name, p.tensor);
  if (opt) opt->load_state(a);
  return info;
}

template <class T>
std::pair<std::unique_ptr<TriPathModel<T>>, CheckpointInfo> model_from_checkpoint(const fs::path& path) {
  const Archive a = Archive::load(path);
  CheckpointInfo info = read_checkpoint_info(a, path.string());
  auto model = build_model<T>(info.config, info.model);
  load_checkpoint(path, *model);
  return {std::move(model), std::move(info)};
}

// ---------------------------------------------------------------------------
// Evaluation

// Per-pixel argmax of [B, C, H, W] logits; ties go to the lowest class.
template <class T>
std::vector<std::uint8_t> argmax_classes(const Tensor<T>& logits) {
  const int b = logits.dim(0), c = logits.dim(1);
  const std::size_t plane = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(b) * plane);
  const T* z = logits.ptr();
  for (int n = 0; n < b; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      int best = 0;
      T bv = z[(static_cast<std::size_t>(n) * c) * plane + i];
      for (int k = 1; k < c; ++k) {
        const T v = z[(static_cast<std::size_t>(n) * c + k) * plane + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[n * plane + i] = static_cast<std::uint8_t>(best);
    }
  return out;
}

template <class T>
std::vector<std::uint8_t> predict_batch(TriPathModel<T>& model, const Batch<T>& batch) {
  NoGradGuard ng;
  return argmax_classes(model.logits(batch.t1, batch.t2, Mode::Eval));
}

// Runs the model over `samples` in order. `on_prediction(pair, classes)`
// sees each sample's predicted mask (H*W bytes).
template <class T, class F>
void for_each_prediction(TriPathModel<T>& model, const std::vector<ImagePair>& samples, const Normalization& norm,
                         int batch_size, F&& on_prediction) {
  BatchOptions bo;
  bo.batch_size = batch_size;
  bo.shuffle = false;
  bo.patch_size = model.config().backbone.patch_size;
  bo.norm = norm;
  BatchStream<T> stream(samples, bo);
  std::size_t next = 0;
  for (const auto& batch : stream.epoch(0)) {
    const auto pred = predict_batch(model, batch);
    const std::size_t plane = pred.size() / static_cast<std::size_t>(batch.size());
    for (int i = 0; i < batch.size(); ++i, ++next)
      on_prediction(samples[next], std::span<const std::uint8_t>(pred.data() + i * plane, plane));
  }
}

template <class T>
MetricsReport evaluate(TriPathModel<T>& model, const std::vector<ImagePair>& samples, const Normalization& norm,
                       int batch_size = 4, std::vector<std::string> class_names = {}) {
  ConfusionMatrix cm(model.config().num_classes);
  for_each_prediction(model, samples, norm, batch_size, [&](const ImagePair& p, std::span<const std::uint8_t> pred) {
    if (!p.mask) throw MissingFile(p.sample_id, "evaluation needs a label");
    cm.accumulate(pred, p.mask->pixels);
  });
  return make_report(cm, std::move(class_names));
}

// Binary-change comparison colors.
inline constexpr std::array<std::uint8_t, 3> kTruePositive{255, 255, 255};
inline constexpr std::array<std::uint8_t, 3> kTrueNegative{0, 0, 0};
inline constexpr std::array<std::uint8_t, 3> kFalsePositive{255, 0, 0};
inline constexpr std::array<std::uint8_t, 3> kFalseNegative{0, 255, 0};

inline Raster comparison_image(const Raster& pred, const Raster& gt) {
  Raster out(gt.width, gt.height, 3);
  for (std::size_t i = 0; i < gt.pixels.size(); ++i) {
    const bool p = pred.pixels[i] != 0, g = gt.pixels[i] != 0;
    const auto& c = p ? (g ? kTruePositive : kFalsePositive) : (g ? kFalseNegative : kTrueNegative);
    for (int k = 0; k < 3; ++k) out.pixels[i * 3 + k] = c[static_cast<std::size_t>(k)];
  }
  return out;
}

// Writes <out>/pred/<id>.png and, for labeled data, <out>/compare/<id>.png.
template <class T>
std::size_t predict(TriPathModel<T>& model, const DatasetManifest& manifest, const Normalization& norm,
                    const fs::path& out, int batch_size = 4) {
  const auto samples = load_split(manifest);
  std::size_t n = 0;
  for_each_prediction(model, samples, norm, batch_size, [&](const ImagePair& p, std::span<const std::uint8_t> pred) {
    Raster r(p.width(), p.height(), 1);
    std::copy(pred.begin(), pred.end(), r.pixels.begin());
    write_png(out / "pred" / (p.sample_id + ".png"), r);
    if (p.mask) write_png(out / "compare" / (p.sample_id + ".png"), comparison_image(r, *p.mask));
    ++n;
  });
  return n;
}

// Confusion matrix of <pred_dir>/<id>.png against the manifest's labels.
inline ConfusionMatrix confusion_from_directory(const fs::path& pred_dir, const DatasetManifest& manifest) {
  if (!manifest.labeled) throw MissingFile(manifest.split, "split has no labels");
  ConfusionMatrix cm(manifest.num_classes);
  for (const auto& id : manifest.entries) {
    const Raster gt = detail::read_mask(manifest.root / "label" / (id + ".png"), id, manifest.num_classes);
    const fs::path pp = pred_dir / (id + ".png");
    if (!fs::is_regular_file(pp)) throw MissingFile(id, pp.string());
    const Raster pred = detail::read_mask(pp, id, manifest.num_classes);
    if (pred.width != gt.width || pred.height != gt.height) throw ShapeMismatch(id, "prediction size differs from label");
    cm.accumulate(pred.pixels, gt.pixels);
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  MetricsReport report;

  json to_json() const {
    return {{"epoch", epoch},
            {"train_loss", train_loss},
            {"OA", score_json(report.OA)},
            {"mIoU", score_json(report.mIoU)},
            {"SeK", score_json(report.SeK)},
            {"F_scd", score_json(report.F_scd)}};
  }
};

struct TrainOutcome {
  std::vector<double> step_losses;
  std::vector<EpochRecord> epochs;
  Score best_miou;
  int best_epoch = -1;
  std::uint64_t fingerprint_before = 0, fingerprint_after = 0;
  fs::path best_checkpoint, last_checkpoint, log_path;
  long steps = 0;
};

struct TrainData {
  DatasetManifest train_manifest, val_manifest;
  std::vector<ImagePair> train, val;
};

inline TrainData load_train_data(const DataConfig& d) {
  if (d.root.empty()) throw InvalidArg("data.root", "training needs a dataset root");
  TrainData td;
  td.train_manifest = load_manifest(d.root, d.train_split);
  if (td.train_manifest.entries.empty()) throw MissingFile(d.train_split, "split has no entries");
  td.val_manifest = td.train_manifest;
  if (!d.val_split.empty()) {
    DatasetManifest v = load_manifest(d.root, d.val_split);
    if (!v.entries.empty()) td.val_manifest = std::move(v);
  }
  td.train = load_split(td.train_manifest);
  td.val = load_split(td.val_manifest);
  return td;
}

inline bool better(const Score& candidate, const Score& incumbent, bool have_incumbent) {
  if (!have_incumbent) return true;
  if (!candidate) return false;
  return !incumbent || *candidate > *incumbent;
}

// Minimizes the composite loss over the model's trainable parameters,
// validating after every epoch. Writes <out>/train_log.jsonl,
// <out>/best.ckpt (by validation mIoU) and <out>/last.ckpt.
template <class T>
TrainOutcome train(const RunConfig& cfg, TriPathModel<T>& model, const TrainData& data) {
  cfg.validate();
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  std::ofstream(out / "config.json") << to_json(cfg).dump(2) << '\n';

  TrainOutcome result;
  result.log_path = out / "train_log.jsonl";
  result.best_checkpoint = out / "best.ckpt";
  result.last_checkpoint = out / "last.ckpt";
  result.fingerprint_before = model.frozen_fingerprint();
  std::ofstream log(result.log_path, std::ios::trunc);

  BatchOptions bo;
  bo.batch_size = cfg.optim.batch_size;
  bo.augment = cfg.data.augment;
  bo.seed = derive_seed(cfg.seed, "batches");
  bo.patch_size = model.config().backbone.patch_size;
  bo.norm = cfg.data.norm;
  BatchStream<T> stream(data.train, bo);
  AdamW<T> opt(model.trainable_parameters(), {cfg.optim.lr, cfg.optim.weight_decay, cfg.optim.beta1,
                                               cfg.optim.beta2, cfg.optim.eps});
  const auto& names = data.train_manifest.class_names;

  bool have_best = false;
  for (int e = 0; e < cfg.optim.epochs; ++e) {
    double loss_sum = 0;
    int batches = 0;
    bool capped = false;
    for (const auto& batch : stream.epoch(e)) {
      opt.zero_grad();
      Tensor<T> loss = total_loss(model.logits(batch.t1, batch.t2, Mode::Train), batch.masks, cfg.loss);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        std::string ids;
        for (const auto& id : batch.sample_ids) ids += (ids.empty() ? "" : ",") + id;
        throw NonFiniteLoss(ids, "epoch " + std::to_string(e) + ", step " + std::to_string(result.steps));
      }
      loss.backward();
      opt.step();
      result.step_losses.push_back(value);
      loss_sum += value;
      ++batches;
      ++result.steps;
      if (cfg.optim.max_steps > 0 && result.steps >= cfg.optim.max_steps) {
        capped = true;
        break;
      }
    }
    EpochRecord rec{e, loss_sum / batches, evaluate(model, data.val, cfg.data.norm, cfg.optim.batch_size, names)};
    log << rec.to_json().dump() << '\n' << std::flush;
    result.epochs.push_back(rec);
    if (better(rec.report.mIoU, result.best_miou, have_best)) {
      have_best = true;
      result.best_miou = rec.report.mIoU;
      result.best_epoch = e;
      save_checkpoint(result.best_checkpoint, model, &opt, cfg, e, result.steps,
                      {{"metric", "mIoU"}, {"value", score_json(rec.report.mIoU)}, {"epoch", e}});
    }
    if (capped) break;
  }
  save_checkpoint(result.last_checkpoint, model, &opt, cfg, result.epochs.back().epoch, result.steps,
                  {{"metric", "mIoU"}, {"value", score_json(result.best_miou)}, {"epoch", result.best_epoch}});
  result.fingerprint_after = model.frozen_fingerprint();
  return result;
}

// ---------------------------------------------------------------------------
// Grad-CAM

enum class CamPath { Backbone, ThirdPath };

inline CamPath parse_cam_path(const std::string& s) {
  if (s == "backbone") return CamPath::Backbone;
  if (s == "third_path") return CamPath::ThirdPath;
  throw InvalidArg(s, "path selector must be backbone or third_path");
}

inline const char* cam_path_name(CamPath p) { return p == CamPath::Backbone ? "backbone" : "third_path"; }

struct Heatmap {
  int height = 0, width = 0;
  std::vector<double> values;  // row-major, in [0, 1]
};

// Grad-CAM of the target class's mean logit on a single pair ([1, 3, H, W]).
// The backbone selector targets f_CNN (the path fed by the backbone's final
// features), the third_path selector targets f_Tr.
template <class T>
Heatmap gradcam(TriPathModel<T>& model, const Tensor<T>& t1, const Tensor<T>& t2, int target_class, CamPath path) {
  if (t1.rank() != 4 || t1.dim(0) != 1) throw ShapeError(to_string(t1.shape()), "Grad-CAM takes a single pair");
  if (target_class < 0 || target_class > model.config().num_classes)
    throw InvalidArg("target_class " + std::to_string(target_class),
                     "must be in [0, " + std::to_string(model.config().num_classes) + "]");
  if (path == CamPath::ThirdPath && !model.third_path())
    throw InvalidArg("third_path", "model was built without the third path");

  ForwardResult<T> r = model.forward(t1, t2, Mode::Eval);
  Tensor<T> feat = path == CamPath::Backbone ? r.f_cnn : r.f_tr;
  feat.zero_grad();
  mean(slice(r.logits, 1, target_class, 1)).backward();

  const int c = feat.dim(1), h = feat.dim(2), w = feat.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  auto a = feat.data();
  auto g = feat.grad();
  std::vector<double> cam(plane, 0.0);
  if (!g.empty()) {
    for (int k = 0; k < c; ++k) {
      double wk = 0;
      for (std::size_t i = 0; i < plane; ++i) wk += g[k * plane + i];
      wk /= static_cast<double>(plane);
      for (std::size_t i = 0; i < plane; ++i) cam[i] += wk * a[k * plane + i];
    }
  }
  for (double& v : cam) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(cam.begin(), cam.end());
  if (*hi == 0.0) throw AllZeroMap(cam_path_name(path), "rectified map is identically zero");
  const double min = *lo, range = *hi - *lo;
  Tensor<double> grid({1, 1, h, w});
  for (std::size_t i = 0; i < plane; ++i) grid.data()[i] = range > 0 ? (cam[i] - min) / range : 1.0;

  Heatmap out{t1.dim(2), t1.dim(3), {}};
  Tensor<double> up = upsample_bilinear(grid, out.height, out.width);
  out.values.assign(up.data().begin(), up.data().end());
  for (double& v : out.values) v = std::clamp(v, 0.0, 1.0);
  return out;
}

inline Raster heatmap_gray(const Heatmap& m) {
  Raster r(m.width, m.height, 1);
  for (std::size_t i = 0; i < m.values.size(); ++i) r.pixels[i] = detail::to_byte(m.values[i]);
  return r;
}

// Half-and-half blend of the image with a black-red-yellow-white ramp.
inline Raster heatmap_overlay(const Heatmap& m, const Raster& image) {
  Raster r(m.width, m.height, 3);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    const double v = m.values[i];
    const std::array<double, 3> ramp{std::clamp(3 * v, 0.0, 1.0), std::clamp(3 * v - 1, 0.0, 1.0),
                                     std::clamp(3 * v - 2, 0.0, 1.0)};
    for (int c = 0; c < 3; ++c)
      r.pixels[i * 3 + c] = detail::to_byte(0.5 * image.pixels[i * 3 + c] / 255.0 + 0.5 * ramp[static_cast<std::size_t>(c)]);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationRow {
  std::string name;
  bool use_third_path = false, use_mlha = false;
  std::size_t parameters = 0, trainable = 0;
  std::uint64_t frozen_fingerprint = 0;
  double final_train_loss = 0;
  MetricsReport report;
};

inline std::vector<std::tuple<std::string, bool, bool>> ablation_grid() {
  return {{"baseline", false, false}, {"+MLHA", false, true}, {"+Path+MLHA", true, true}};
}

inline std::string format_score(const Score& s) {
  if (!s) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *s);
  return buf;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| variant | Path | MLHA | params | trainable | frozen fingerprint | OA | mIoU | SeK | F_scd |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    os << "| " << r.name << " | " << (r.use_third_path ? "yes" : "no") << " | " << (r.use_mlha ? "yes" : "no") << " | "
       << r.parameters << " | " << r.trainable << " | " << hex64(r.frozen_fingerprint) << " | " << format_score(r.report.OA)
       << " | " << format_score(r.report.mIoU) << " | " << format_score(r.report.SeK) << " | "
       << format_score(r.report.F_scd) << " |\n";
  return os.str();
}

inline json ablation_json(const std::vector<AblationRow>& rows) {
  json j = json::array();
  for (const auto& r : rows)
    j.push_back({{"variant", r.name},
                 {"use_third_path", r.use_third_path},
                 {"use_mlha", r.use_mlha},
                 {"parameters", r.parameters},
                 {"trainable", r.trainable},
                 {"frozen_fingerprint", hex64(r.frozen_fingerprint)},
                 {"final_train_loss", r.final_train_loss},
                 {"metrics", to_json(r.report)}});
  return j;
}

// Trains and evaluates each grid variant with the same seed and data;
// writes <out>/<variant>/..., <out>/ablation.md and <out>/ablation.json.
template <class T>
std::vector<AblationRow> ablate(const RunConfig& cfg) {
  const TrainData data = load_train_data(cfg.data);
  std::vector<AblationRow> rows;
  for (const auto& [name, path, mlha] : ablation_grid()) {
    RunConfig rc = cfg;
    rc.model.use_third_path = path;
    rc.model.use_mlha = mlha;
    rc.output_dir = (fs::path(cfg.output_dir) / (name[0] == '+' ? name.substr(1) : name)).string();
    const ModelConfig mc = resolve_model(rc, &data.train_manifest);
    auto model = build_model<T>(rc, mc);
    AblationRow row{name, path, mlha, model->parameter_count(), count_elements(model->trainable_parameters()),
                    model->frozen_fingerprint(), 0.0, {}};
    const TrainOutcome t = train(rc, *model, data);
    row.final_train_loss = t.epochs.back().train_loss;
    row.report = t.epochs.back().report;
    rows.push_back(std::move(row));
  }
  fs::create_directories(cfg.output_dir);
  std::ofstream(fs::path(cfg.output_dir) / "ablation.md") << ablation_table(rows);
  std::ofstream(fs::path(cfg.output_dir) / "ablation.json") << ablation_json(rows).dump(2) << '\n';
  return rows;
}

}  // namespace tripath
