#pragma once

// Weight-shared ViT encoder with frozen base weights and trainable LoRA
// (query/value projections) and bottleneck adapters (after each MLP).
//
// Tensor names: backbone.patch_embed.*, backbone.block<i>.{norm1,norm2}.*,
// backbone.block<i>.attn.{q,k,v,proj}.*, backbone.block<i>.mlp.{fc1,fc2}.*,
// backbone.norm.*; trainable insertions live under
// backbone.block<i>.attn.{q,v}.lora_{a,b} and backbone.block<i>.adapter.{down,up}.*.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tripath/archive.hpp"
#include "tripath/attention.hpp"

namespace tripath {

struct BackboneConfig {
  int in_channels = 3;
  int patch_size = 8;
  int embed_dim = 64;
  int depth = 6;
  int heads = 4;
  int mlp_ratio = 4;
  std::vector<int> tap_layers;  // empty: evenly spaced thirds of depth
  int lora_rank = 4;
  double lora_alpha = 0;  // 0: same as the rank (unit scaling)
  int adapter_dim = 16;
  bool freeze_base = true;

  // (1, 3, 5) for depth 6.
  static std::vector<int> default_taps(int depth) {
    return {depth / 3 - 1, 2 * depth / 3 - 1, depth - 1};
  }

  std::vector<int> taps() const { return tap_layers.empty() ? default_taps(depth) : tap_layers; }

  void validate() const {
    if (patch_size < 1 || embed_dim < 1 || depth < 3 || heads < 1) throw InvalidArg("backbone", "non-positive size");
    if (embed_dim % heads != 0) throw InvalidArg("backbone", "embed_dim must divide by heads");
    if (embed_dim % 4 != 0) throw InvalidArg("backbone", "embed_dim must be a multiple of 4");
    const auto t = taps();
    if (t.size() != 3) throw InvalidArg("tap_layers", "exactly three taps required");
    if (!(t[0] >= 0 && t[0] < t[1] && t[1] < t[2] && t[2] < depth))
      throw InvalidArg("tap_layers", "taps must be strictly increasing and below depth");
    if (lora_rank < 0 || lora_rank >= embed_dim) throw InvalidArg("lora_rank", "must satisfy 0 <= r < embed_dim");
    if (adapter_dim < 0 || adapter_dim >= embed_dim) throw InvalidArg("adapter_dim", "must satisfy 0 <= a < embed_dim");
  }
};

// Final feature S plus the three tapped intermediates, each [B, d, h, w].
template <class T>
struct FeatureBundle {
  Tensor<T> S, C2, C3, C4;
};

// Low-rank additive update B(A x) * scale; B starts at zero.
template <class T>
struct LoraUpdate {
  Linear<T> a, b;
  T scale = T(1);

  LoraUpdate() = default;
  LoraUpdate(int in, int out, int rank, double alpha, Rng& rng)
      : a(in, rank, rng, true, false), b(rank, out, rng, true, false) {
    std::fill(b.weight.data().begin(), b.weight.data().end(), T(0));
    scale = static_cast<T>((alpha > 0 ? alpha : rank) / rank);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> u = b(a(x));
    return scale == T(1) ? u : tripath::scale(u, scale);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".lora_a", a.weight, Role::Trainable});
    out.push_back({prefix + ".lora_b", b.weight, Role::Trainable});
  }
};

// Bottleneck down -> GELU -> up added residually; up starts at zero.
template <class T>
struct Adapter {
  Linear<T> down, up;

  Adapter() = default;
  Adapter(int width, int bottleneck, Rng& rng) : down(width, bottleneck, rng), up(bottleneck, width, rng) {
    std::fill(up.weight.data().begin(), up.weight.data().end(), T(0));
    std::fill(up.bias.data().begin(), up.bias.data().end(), T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return up(gelu(down(x))); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    down.collect(prefix + ".down", out);
    up.collect(prefix + ".up", out);
  }
};

template <class T>
struct VitBlock {
  LayerNorm<T> norm1, norm2;
  Linear<T> q, k, v, proj, fc1, fc2;
  std::optional<LoraUpdate<T>> lora_q, lora_v;
  std::optional<Adapter<T>> adapter;
  int heads = 1;

  VitBlock(const BackboneConfig& cfg, Rng& base_rng, Rng& adapt_rng) : heads(cfg.heads) {
    const int d = cfg.embed_dim;
    const bool train_base = !cfg.freeze_base;
    norm1 = LayerNorm<T>(d, train_base);
    norm2 = LayerNorm<T>(d, train_base);
    q = Linear<T>(d, d, base_rng, train_base);
    k = Linear<T>(d, d, base_rng, train_base);
    v = Linear<T>(d, d, base_rng, train_base);
    proj = Linear<T>(d, d, base_rng, train_base);
    fc1 = Linear<T>(d, d * cfg.mlp_ratio, base_rng, train_base);
    fc2 = Linear<T>(d * cfg.mlp_ratio, d, base_rng, train_base);
    if (cfg.lora_rank > 0) {
      lora_q.emplace(d, d, cfg.lora_rank, cfg.lora_alpha, adapt_rng);
      lora_v.emplace(d, d, cfg.lora_rank, cfg.lora_alpha, adapt_rng);
    }
    if (cfg.adapter_dim > 0) adapter.emplace(d, cfg.adapter_dim, adapt_rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> h = norm1(x);
    Tensor<T> qh = q(h), vh = v(h);
    if (lora_q) qh = add(qh, (*lora_q)(h));
    if (lora_v) vh = add(vh, (*lora_v)(h));
    Tensor<T> y = add(x, proj(scaled_dot_product_attention(qh, k(h), vh, heads)));
    y = add(y, fc2(gelu(fc1(norm2(y)))));
    if (adapter) y = add(y, (*adapter)(y));
    return y;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    norm1.collect(prefix + ".norm1", out);
    q.collect(prefix + ".attn.q", out);
    k.collect(prefix + ".attn.k", out);
    v.collect(prefix + ".attn.v", out);
    proj.collect(prefix + ".attn.proj", out);
    norm2.collect(prefix + ".norm2", out);
    fc1.collect(prefix + ".mlp.fc1", out);
    fc2.collect(prefix + ".mlp.fc2", out);
    if (lora_q) lora_q->collect(prefix + ".attn.q", out);
    if (lora_v) lora_v->collect(prefix + ".attn.v", out);
    if (adapter) adapter->collect(prefix + ".adapter", out);
  }
};

template <class T>
class SiameseBackbone {
 public:
  SiameseBackbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng base_rng(derive_seed(seed, "backbone.base"));
    Rng adapt_rng(derive_seed(seed, "backbone.adapt"));
    const int d = cfg_.embed_dim;
    const int patch_dim = cfg_.in_channels * cfg_.patch_size * cfg_.patch_size;
    const bool train_base = !cfg_.freeze_base;
    patch_embed_ = Linear<T>(patch_dim, d, base_rng, train_base);
    blocks_.reserve(static_cast<std::size_t>(cfg_.depth));
    for (int i = 0; i < cfg_.depth; ++i) blocks_.emplace_back(cfg_, base_rng, adapt_rng);
    norm_ = LayerNorm<T>(d, train_base);
  }

  const BackboneConfig& config() const { return cfg_; }

  // image: [B, C, H, W] with H, W divisible by the patch size.
  FeatureBundle<T> encode(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != cfg_.in_channels)
      throw ShapeError(to_string(image.shape()), "expected [B, " + std::to_string(cfg_.in_channels) + ", H, W]");
    const int b = image.dim(0), c = image.dim(1), H = image.dim(2), W = image.dim(3), p = cfg_.patch_size;
    if (H % p != 0 || W % p != 0)
      throw ShapeError(to_string(image.shape()), "H and W must be divisible by patch size " + std::to_string(p));
    const int h = H / p, w = W / p;
    Tensor<T> patches = reshape(permute(reshape(image, {b, c, h, p, w, p}), {0, 2, 4, 1, 3, 5}), {b, h * w, c * p * p});
    Tensor<T> x = add(patch_embed_(patches), sincos_position_2d<T>(h, w, cfg_.embed_dim));
    const auto taps = cfg_.taps();
    std::vector<Tensor<T>> tapped;
    for (int i = 0; i < cfg_.depth; ++i) {
      x = blocks_[static_cast<std::size_t>(i)](x);
      if (std::find(taps.begin(), taps.end(), i) != taps.end()) tapped.push_back(x);
    }
    auto to_grid = [&](const Tensor<T>& tokens) { return tokens_to_grid(norm_(tokens), h, w); };
    return {to_grid(x), to_grid(tapped[0]), to_grid(tapped[1]), to_grid(tapped[2])};
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    patch_embed_.collect(prefix + ".patch_embed", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    norm_.collect(prefix + ".norm", out);
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect("backbone", out);
    return out;
  }

  ParamList<T> trainable_parameters() const {
    ParamList<T> out;
    for (auto& p : parameters())
      if (p.role == Role::Trainable) out.push_back(p);
    return out;
  }

  // Base (non-LoRA, non-adapter) tensors, whether frozen or not.
  ParamList<T> base_parameters() const {
    ParamList<T> out;
    for (auto& p : parameters())
      if (!is_adaptation(p.name)) out.push_back(p);
    return out;
  }

  void save_base_weights(const std::filesystem::path& path) const {
    Archive a;
    a.metadata["kind"] = "backbone";
    a.metadata["embed_dim"] = cfg_.embed_dim;
    a.metadata["depth"] = cfg_.depth;
    a.metadata["patch_size"] = cfg_.patch_size;
    for (const auto& p : base_parameters()) a.put(p.name, p.tensor);
    a.save(path);
  }

  // Replaces every base tensor from `checkpoint`; LoRA and adapter state is
  // left untouched. Validates the whole archive before writing anything.
  void load_external_weights(const std::filesystem::path& checkpoint) {
    const Archive a = Archive::load(checkpoint);
    const auto base = base_parameters();
    for (const auto& p : base) {
      if (!a.contains(p.name)) throw MissingTensor(p.name);
      if (a.record(p.name).shape != p.tensor.shape())
        throw ShapeMismatch(p.name, "checkpoint " + to_string(a.record(p.name).shape) + ", model " +
                                        to_string(p.tensor.shape()));
    }
    for (auto p : base) a.get_into(p.name, p.tensor);
  }

  static bool is_adaptation(const std::string& name) {
    return name.find(".lora_") != std::string::npos || name.find(".adapter.") != std::string::npos;
  }

 private:
  BackboneConfig cfg_;
  Linear<T> patch_embed_;
  std::vector<VitBlock<T>> blocks_;
  LayerNorm<T> norm_;
};

}  // namespace tripath
