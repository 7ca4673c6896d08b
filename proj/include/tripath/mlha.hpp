#pragma once

// Multi-Level Hybrid Attention decoder.
//
// Initial fusion:
//   F_k       = GELU(BN(Conv_k(f_fuse)))               k over kernel_sizes
//   gate      = sigmoid(BN(Conv1x1(concat_k F_k)))
//   X_spatial = f_fuse * gate
//   y         = f_fuse + GELU(BN(Conv3x3(X_spatial)))
// Final fusion:
//   out = y + y_channel + y_spatial + y_local
//   y_channel = s_c * y * sigmoid(MLP(GAP(y)))        (SE-style, per channel)
//   y_spatial = s_s * y * sigmoid(Conv1x1(y) -> 1 map)
//   y_local   = DepthwiseConv3x3(y)
// s_c, s_s are learned per-channel branch scales (initialized to 1).

#include <bit>
#include <vector>

#include "tripath/nn.hpp"

namespace tripath {

struct MlhaConfig {
  int channels = 128;
  std::vector<int> kernel_sizes{3, 5, 7};
  int reduction = 4;

  void validate() const {
    if (channels < 1) throw InvalidArg("mlha.channels", "must be positive");
    if (kernel_sizes.empty()) throw InvalidArg("mlha.kernel_sizes", "at least one kernel required");
    for (int k : kernel_sizes)
      if (k < 1 || k % 2 == 0) throw ShapeError("kernel " + std::to_string(k), "MLHA kernel sizes must be odd");
    if (reduction < 1) throw InvalidArg("mlha.reduction", "must be positive");
  }
};

template <class T>
class InitialFusion {
 public:
  struct Trace {
    std::vector<Tensor<T>> branches;
    Tensor<T> concat, gate, x_spatial;
  };

  InitialFusion(const MlhaConfig& cfg, Rng& rng) {
    cfg.validate();
    const int c = cfg.channels;
    for (int k : cfg.kernel_sizes) {
      branch_conv_.emplace_back(c, c, k, rng);
      branch_bn_.emplace_back(c);
    }
    gate_conv_ = Conv2d<T>(c * static_cast<int>(cfg.kernel_sizes.size()), c, 1, rng);
    gate_bn_ = BatchNorm2d<T>(c);
    refine_conv_ = Conv2d<T>(c, c, 3, rng);
    refine_bn_ = BatchNorm2d<T>(c);
  }

  Tensor<T> operator()(const Tensor<T>& f_fuse, Mode mode, Trace* trace = nullptr) {
    std::vector<Tensor<T>> branches;
    for (std::size_t i = 0; i < branch_conv_.size(); ++i)
      branches.push_back(gelu(branch_bn_[i](branch_conv_[i](f_fuse), mode)));
    Tensor<T> cat = concat(branches, 1);
    Tensor<T> gate = sigmoid(gate_bn_(gate_conv_(cat), mode));
    Tensor<T> xs = mul(f_fuse, gate);
    if (trace) *trace = {branches, cat, gate, xs};
    return add(f_fuse, gelu(refine_bn_(refine_conv_(xs), mode)));
  }

  // Zeroes the refinement conv and its BN shift so that y == f_fuse.
  void zero_refinement() {
    refine_conv_.zero();
    std::fill(refine_bn_.beta.data().begin(), refine_bn_.beta.data().end(), T(0));
  }

  std::vector<Conv2d<T>>& branch_convs() { return branch_conv_; }
  std::vector<BatchNorm2d<T>>& branch_norms() { return branch_bn_; }
  Conv2d<T>& gate_conv() { return gate_conv_; }
  BatchNorm2d<T>& gate_norm() { return gate_bn_; }
  Conv2d<T>& refine_conv() { return refine_conv_; }
  BatchNorm2d<T>& refine_norm() { return refine_bn_; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t i = 0; i < branch_conv_.size(); ++i) {
      const std::string k = std::to_string(branch_conv_[i].kernel());
      branch_conv_[i].collect(prefix + ".branch" + k + ".conv", out);
      branch_bn_[i].collect(prefix + ".branch" + k + ".bn", out);
    }
    gate_conv_.collect(prefix + ".gate.conv", out);
    gate_bn_.collect(prefix + ".gate.bn", out);
    refine_conv_.collect(prefix + ".refine.conv", out);
    refine_bn_.collect(prefix + ".refine.bn", out);
  }

 private:
  std::vector<Conv2d<T>> branch_conv_;
  std::vector<BatchNorm2d<T>> branch_bn_;
  Conv2d<T> gate_conv_;
  BatchNorm2d<T> gate_bn_;
  Conv2d<T> refine_conv_;
  BatchNorm2d<T> refine_bn_;
};

template <class T>
class FinalFusion {
 public:
  struct Trace {
    Tensor<T> channel_gate;  // [B, C, 1, 1]
    Tensor<T> spatial_gate;  // [B, 1, H, W]
    Tensor<T> y_channel, y_spatial, y_local;
  };

  FinalFusion(const MlhaConfig& cfg, Rng& rng) {
    const int c = cfg.channels;
    const int hidden = std::max(1, c / cfg.reduction);
    fc1_ = Linear<T>(c, hidden, rng);
    fc2_ = Linear<T>(hidden, c, rng);
    spatial_ = Conv2d<T>(c, 1, 1, rng);
    local_ = Conv2d<T>(c, c, 3, rng, c);
    channel_scale_ = Tensor<T>({1, c, 1, 1}, T(1), true);
    spatial_scale_ = Tensor<T>({1, c, 1, 1}, T(1), true);
  }

  Tensor<T> operator()(const Tensor<T>& y, Mode, Trace* trace = nullptr) const {
    const int b = y.dim(0), c = y.dim(1);
    Tensor<T> pooled = reshape(global_avg_pool(y), {b, c});
    Tensor<T> cg = reshape(sigmoid(fc2_(gelu(fc1_(pooled)))), {b, c, 1, 1});
    Tensor<T> sg = sigmoid(spatial_(y));
    Tensor<T> yc = mul(mul(y, cg), channel_scale_);
    Tensor<T> ys = mul(mul(y, sg), spatial_scale_);
    Tensor<T> yl = local_(y);
    if (trace) *trace = {cg, sg, yc, ys, yl};
    return add(add(add(y, yc), ys), yl);
  }

  // Zeroes the branch scales and the depthwise conv so that out == y.
  void zero_branches() {
    std::fill(channel_scale_.data().begin(), channel_scale_.data().end(), T(0));
    std::fill(spatial_scale_.data().begin(), spatial_scale_.data().end(), T(0));
    local_.zero();
  }

  Linear<T>& fc1() { return fc1_; }
  Linear<T>& fc2() { return fc2_; }
  Conv2d<T>& spatial_conv() { return spatial_; }
  Conv2d<T>& local_conv() { return local_; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    fc1_.collect(prefix + ".channel.fc1", out);
    fc2_.collect(prefix + ".channel.fc2", out);
    out.push_back({prefix + ".channel.scale", channel_scale_, Role::Trainable});
    spatial_.collect(prefix + ".spatial.conv", out);
    out.push_back({prefix + ".spatial.scale", spatial_scale_, Role::Trainable});
    local_.collect(prefix + ".local.conv", out);
  }

 private:
  Linear<T> fc1_, fc2_;
  Conv2d<T> spatial_, local_;
  Tensor<T> channel_scale_, spatial_scale_;
};

// Plain conv3x3 -> BN -> GELU block used in place of MLHA for ablations.
template <class T>
struct PlainFusion {
  Conv2d<T> conv;
  BatchNorm2d<T> norm;

  PlainFusion(int channels, Rng& rng) : conv(channels, channels, 3, rng), norm(channels) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return gelu(norm(conv(x), mode)); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    conv.collect(prefix + ".conv", out);
    norm.collect(prefix + ".bn", out);
  }
};

// Progressive 2x bilinear upsampling, each step followed by conv3x3 + GELU
// with halved width (floor 16), then a 1x1 classifier to num_classes + 1.
template <class T>
class DecodeHead {
 public:
  static constexpr int kMinWidth = 16;

  DecodeHead(int in_channels, int num_classes, int upsample_factor, Rng& rng) : factor_(upsample_factor) {
    if (upsample_factor < 1 || !std::has_single_bit(static_cast<unsigned>(upsample_factor)))
      throw ShapeError("factor " + std::to_string(upsample_factor), "upsample factor must be a power of two");
    int width = in_channels;
    for (int f = upsample_factor; f > 1; f /= 2) {
      const int next = std::max(kMinWidth, width / 2);
      stages_.emplace_back(width, next, 3, rng);
      width = next;
    }
    classifier_ = Conv2d<T>(width, num_classes + 1, 1, rng);
  }

  int factor() const { return factor_; }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (const auto& conv : stages_) h = gelu(conv(upsample_bilinear(h, 2 * h.dim(2), 2 * h.dim(3))));
    return classifier_(h);
  }

  Conv2d<T>& classifier() { return classifier_; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t i = 0; i < stages_.size(); ++i) stages_[i].collect(prefix + ".up" + std::to_string(i), out);
    classifier_.collect(prefix + ".classifier", out);
  }

 private:
  int factor_;
  std::vector<Conv2d<T>> stages_;
  Conv2d<T> classifier_;
};

}  // namespace tripath
