#pragma once

// Coarse change path: f_CNN = FT2([S1 - S2, FT1([S1, S2])]) with [.,.] the
// channel concatenation and each FT a conv3x3 -> BN -> GELU -> conv1x1 stack.

#include "tripath/nn.hpp"

namespace tripath {

template <class T>
struct ConvProcessor {
  Conv2d<T> conv3;
  BatchNorm2d<T> norm;
  Conv2d<T> conv1;

  ConvProcessor() = default;
  ConvProcessor(int in, int out, Rng& rng) : conv3(in, out, 3, rng), norm(out), conv1(out, out, 1, rng) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return conv1(gelu(norm(conv3(x), mode))); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    conv3.collect(prefix + ".conv3", out);
    norm.collect(prefix + ".bn", out);
    conv1.collect(prefix + ".conv1", out);
  }
};

struct CnnPathConfig {
  int in_channels = 64;   // backbone width d
  int ft1_channels = 0;   // 0: keep d
  int out_channels = 64;
};

template <class T>
class CnnPath {
 public:
  CnnPath(const CnnPathConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.ft1_channels <= 0) cfg_.ft1_channels = cfg_.in_channels;
    Rng rng(derive_seed(seed, "cnn_path"));
    ft1_ = ConvProcessor<T>(2 * cfg_.in_channels, cfg_.ft1_channels, rng);
    ft2_ = ConvProcessor<T>(cfg_.in_channels + cfg_.ft1_channels, cfg_.out_channels, rng);
  }

  int out_channels() const { return cfg_.out_channels; }

  // v = [S1 - S2, FT1([S1, S2])], the input of FT2.
  Tensor<T> fused_input(const Tensor<T>& s1, const Tensor<T>& s2, Mode mode) {
    if (s1.shape() != s2.shape()) throw ShapeMismatch(to_string(s1.shape()) + " vs " + to_string(s2.shape()), "S1/S2");
    if (s1.rank() != 4 || s1.dim(1) != cfg_.in_channels)
      throw ShapeMismatch(to_string(s1.shape()), "expected " + std::to_string(cfg_.in_channels) + " channels");
    Tensor<T> u = ft1_(concat<T>({s1, s2}, 1), mode);
    return concat<T>({sub(s1, s2), u}, 1);
  }

  Tensor<T> operator()(const Tensor<T>& s1, const Tensor<T>& s2, Mode mode) { return ft2_(fused_input(s1, s2, mode), mode); }

  ConvProcessor<T>& ft1() { return ft1_; }
  ConvProcessor<T>& ft2() { return ft2_; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    ft1_.collect(prefix + ".ft1", out);
    ft2_.collect(prefix + ".ft2", out);
  }

 private:
  CnnPathConfig cfg_;
  ConvProcessor<T> ft1_, ft2_;
};

}  // namespace tripath
