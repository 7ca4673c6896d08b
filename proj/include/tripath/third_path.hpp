#pragma once

// Fine-grained path: Q = C2 + D2, K = C3 + D3, V = C4 + D4 (shallow tap to
// query, deepest tap to value), projected to the attention width and fed
// through residual multi-head attention blocks to give f_Tr.

#include "tripath/backbone.hpp"

namespace tripath {

struct ThirdPathConfig {
  int in_channels = 64;  // backbone width d
  int d_model = 64;
  int heads = 4;
  int blocks = 1;
  int out_channels = 64;

  void validate() const {
    if (d_model < 1 || heads < 1 || blocks < 1 || out_channels < 1) throw InvalidArg("third_path", "non-positive size");
    if (d_model % heads != 0) throw InvalidArg("third_path", "d_model must divide by heads");
    if (d_model % 4 != 0) throw InvalidArg("third_path", "d_model must be a multiple of 4");
  }
};

template <class T>
struct QkvTokens {
  Tensor<T> q, k, v;  // [B, h*w, width]
};

// Pre-projection sums of the bi-temporal taps, flattened to token sequences.
template <class T>
QkvTokens<T> sum_taps(const FeatureBundle<T>& t1, const FeatureBundle<T>& t2) {
  for (const auto* pair : {&t1, &t2})
    for (const Tensor<T>* m : {&pair->C2, &pair->C3, &pair->C4})
      if (m->shape() != t1.C2.shape()) throw ShapeMismatch(to_string(m->shape()), "tap shapes differ");
  return {grid_to_tokens(add(t1.C2, t2.C2)), grid_to_tokens(add(t1.C3, t2.C3)), grid_to_tokens(add(t1.C4, t2.C4))};
}

template <class T>
class ThirdPath {
 public:
  struct Block {
    MultiHeadAttention<T> attn;
    LayerNorm<T> norm;
  };

  ThirdPath(const ThirdPathConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "third_path"));
    in_q_ = Linear<T>(cfg_.in_channels, cfg_.d_model, rng);
    in_k_ = Linear<T>(cfg_.in_channels, cfg_.d_model, rng);
    in_v_ = Linear<T>(cfg_.in_channels, cfg_.d_model, rng);
    for (int i = 0; i < cfg_.blocks; ++i) blocks_.push_back({MultiHeadAttention<T>(cfg_.d_model, cfg_.heads, rng), LayerNorm<T>(cfg_.d_model)});
    out_ = Linear<T>(cfg_.d_model, cfg_.out_channels, rng);
  }

  const ThirdPathConfig& config() const { return cfg_; }
  int out_channels() const { return cfg_.out_channels; }

  // Projected Q, K, V with the 2-D position table added to Q and K.
  QkvTokens<T> form_qkv(const FeatureBundle<T>& t1, const FeatureBundle<T>& t2) const {
    QkvTokens<T> raw = sum_taps(t1, t2);
    const int h = t1.C2.dim(2), w = t1.C2.dim(3);
    Tensor<T> pe = sincos_position_2d<T>(h, w, cfg_.d_model);
    return {add(in_q_(raw.q), pe), add(in_k_(raw.k), pe), in_v_(raw.v)};
  }

  // Attention blocks on projected tokens; returns [B, h*w, d_model] tokens
  // before the output projection. `probs` collects each block's weights.
  Tensor<T> attend_tokens(const QkvTokens<T>& qkv, std::vector<Tensor<T>>* probs = nullptr) const {
    Tensor<T> h = qkv.q;
    for (const auto& blk : blocks_) {
      Tensor<T> p;
      h = blk.norm(add(h, blk.attn(h, qkv.k, qkv.v, probs ? &p : nullptr)));
      if (probs) probs->push_back(p);
    }
    return h;
  }

  // f_Tr on the tap grid, resized to (out_h, out_w) when that differs.
  Tensor<T> operator()(const FeatureBundle<T>& t1, const FeatureBundle<T>& t2, int out_h, int out_w) const {
    const int h = t1.C2.dim(2), w = t1.C2.dim(3);
    Tensor<T> f = tokens_to_grid(out_(attend_tokens(form_qkv(t1, t2))), h, w);
    if (h != out_h || w != out_w) f = upsample_bilinear(f, out_h, out_w);
    return f;
  }

  std::vector<Block>& blocks() { return blocks_; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    in_q_.collect(prefix + ".in_q", out);
    in_k_.collect(prefix + ".in_k", out);
    in_v_.collect(prefix + ".in_v", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = prefix + ".block" + std::to_string(i);
      blocks_[i].attn.collect(p + ".attn", out);
      blocks_[i].norm.collect(p + ".norm", out);
    }
    out_.collect(prefix + ".out", out);
  }

 private:
  ThirdPathConfig cfg_;
  Linear<T> in_q_, in_k_, in_v_;
  std::vector<Block> blocks_;
  Linear<T> out_;
};

}  // namespace tripath
