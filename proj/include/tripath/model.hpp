#pragma once

// Full change-detection network: siamese backbone -> CNN path (+ optional
// third path) -> MLHA (or plain) fusion -> upsampling head.

#include <optional>

#include "tripath/backbone.hpp"
#include "tripath/cnn_path.hpp"
#include "tripath/mlha.hpp"
#include "tripath/third_path.hpp"

namespace tripath {

struct ModelConfig {
  BackboneConfig backbone;
  int ft1_channels = 0;  // 0: backbone width
  int cnn_channels = 64;
  int third_d_model = 64;
  int third_heads = 4;
  int third_blocks = 1;
  int third_channels = 64;
  std::vector<int> kernel_sizes{3, 5, 7};
  int channel_reduction = 4;
  int num_classes = 6;
  bool use_third_path = true;
  bool use_mlha = true;

  int fused_channels() const { return cnn_channels + (use_third_path ? third_channels : 0); }

  ThirdPathConfig third_path() const {
    return {backbone.embed_dim, third_d_model, third_heads, third_blocks, third_channels};
  }
};

template <class T>
struct ForwardResult {
  FeatureBundle<T> t1, t2;
  Tensor<T> f_cnn, f_tr, f_fuse, decoded, logits;
};

template <class T>
class TriPathModel {
 public:
  TriPathModel(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_(cfg),
        backbone_(cfg.backbone, seed),
        cnn_(CnnPathConfig{cfg.backbone.embed_dim, cfg.ft1_channels, cfg.cnn_channels}, seed) {
    if (cfg_.num_classes < 1) throw InvalidArg("num_classes", "must be at least 1");
    if (cfg_.use_third_path) third_.emplace(cfg_.third_path(), seed);
    Rng rng(derive_seed(seed, "decoder"));
    const int c = cfg_.fused_channels();
    if (cfg_.use_mlha) {
      MlhaConfig m{c, cfg_.kernel_sizes, cfg_.channel_reduction};
      initial_.emplace(m, rng);
      final_.emplace(m, rng);
    } else {
      plain_.emplace(c, rng);
    }
    head_.emplace(c, cfg_.num_classes, cfg_.backbone.patch_size, rng);
  }

  TriPathModel(const TriPathModel&) = delete;
  TriPathModel& operator=(const TriPathModel&) = delete;
  TriPathModel(TriPathModel&&) = default;

  const ModelConfig& config() const { return cfg_; }

  ForwardResult<T> forward(const Tensor<T>& t1, const Tensor<T>& t2, Mode mode) {
    if (t1.shape() != t2.shape()) throw ShapeMismatch(to_string(t1.shape()) + " vs " + to_string(t2.shape()), "T1/T2");
    ForwardResult<T> r;
    r.t1 = backbone_.encode(t1);
    r.t2 = backbone_.encode(t2);
    r.f_cnn = cnn_(r.t1.S, r.t2.S, mode);
    const int h = r.f_cnn.dim(2), w = r.f_cnn.dim(3);
    if (third_) {
      r.f_tr = (*third_)(r.t1, r.t2, h, w);
      r.f_fuse = concat<T>({r.f_cnn, r.f_tr}, 1);
    } else {
      r.f_fuse = r.f_cnn;
    }
    r.decoded = initial_ ? (*final_)((*initial_)(r.f_fuse, mode), mode) : (*plain_)(r.f_fuse, mode);
    if (h * head_->factor() != t1.dim(2) || w * head_->factor() != t1.dim(3))
      throw ShapeError(to_string(t1.shape()), "upsample factor inconsistent with input size");
    r.logits = (*head_)(r.decoded);
    return r;
  }

  Tensor<T> logits(const Tensor<T>& t1, const Tensor<T>& t2, Mode mode) { return forward(t1, t2, mode).logits; }

  SiameseBackbone<T>& backbone() { return backbone_; }
  const SiameseBackbone<T>& backbone() const { return backbone_; }
  CnnPath<T>& cnn_path() { return cnn_; }
  ThirdPath<T>* third_path() { return third_ ? &*third_ : nullptr; }
  InitialFusion<T>* initial_fusion() { return initial_ ? &*initial_ : nullptr; }
  FinalFusion<T>* final_fusion() { return final_ ? &*final_ : nullptr; }
  DecodeHead<T>& head() { return *head_; }

  ParamList<T> parameters() const {
    ParamList<T> out;
    backbone_.collect("backbone", out);
    cnn_.collect("cnn", out);
    if (third_) third_->collect("third", out);
    if (initial_) initial_->collect("decoder.mlha.initial", out);
    if (final_) final_->collect("decoder.mlha.final", out);
    if (plain_) plain_->collect("decoder.plain", out);
    head_->collect("decoder.head", out);
    return out;
  }

  ParamList<T> trainable_parameters() const {
    ParamList<T> out;
    for (auto& p : parameters())
      if (p.role == Role::Trainable) out.push_back(p);
    return out;
  }

  std::uint64_t frozen_fingerprint() const { return fingerprint(parameters(), Role::Frozen); }

  std::size_t parameter_count() const { return count_elements(parameters()); }

 private:
  ModelConfig cfg_;
  SiameseBackbone<T> backbone_;
  CnnPath<T> cnn_;
  std::optional<ThirdPath<T>> third_;
  std::optional<InitialFusion<T>> initial_;
  std::optional<FinalFusion<T>> final_;
  std::optional<PlainFusion<T>> plain_;
  std::optional<DecodeHead<T>> head_;
};

}  // namespace tripath
