#pragma once

// Parameter bookkeeping and the basic layers shared by every path.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tripath/ops.hpp"

namespace tripath {

enum class Mode { Train, Eval };

enum class Role { Frozen, Trainable, Buffer };

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  Role role;
};

template <class T>
using ParamList = std::vector<NamedTensor<T>>;

using Rng = std::mt19937_64;

// Stable per-component seed so that constructing one part of a model never
// perturbs the initial weights of another.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 1469598103934665603ull ^ seed;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

template <class T>
Tensor<T> uniform_tensor(Shape shape, T bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
Tensor<T> normal_tensor(Shape shape, T stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

inline Role param_role(bool trainable) { return trainable ? Role::Trainable : Role::Frozen; }

template <class T>
void mark(Tensor<T>& t, Role role) {
  t.set_requires_grad(role == Role::Trainable);
}

template <class T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out] or undefined
  Role role = Role::Trainable;

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool trainable = true, bool with_bias = true)
      : role(param_role(trainable)) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in));
    weight = uniform_tensor<T>({out, in}, bound, rng);
    if (with_bias) bias = uniform_tensor<T>({out}, bound, rng);
    set_role(role);
  }

  void set_role(Role r) {
    role = r;
    mark(weight, r);
    if (bias.defined()) mark(bias, r);
  }

  int in_features() const { return weight.dim(1); }
  int out_features() const { return weight.dim(0); }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight, role});
    if (bias.defined()) out.push_back({prefix + ".bias", bias, role});
  }
};

template <class T>
struct Conv2d {
  Tensor<T> weight;  // [out, in/groups, k, k]
  Tensor<T> bias;
  int groups = 1;
  Role role = Role::Trainable;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, Rng& rng, int groups_ = 1, bool with_bias = true) : groups(groups_) {
    if (kernel % 2 == 0) throw ShapeError("kernel " + std::to_string(kernel), "convolution kernels must be odd");
    const int fan_in = in / groups * kernel * kernel;
    const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
    weight = uniform_tensor<T>({out, in / groups, kernel, kernel}, bound, rng);
    if (with_bias) bias = uniform_tensor<T>({out}, bound, rng);
    set_role(Role::Trainable);
  }

  void set_role(Role r) {
    role = r;
    mark(weight, r);
    if (bias.defined()) mark(bias, r);
  }

  void zero() {
    std::fill(weight.data().begin(), weight.data().end(), T(0));
    if (bias.defined()) std::fill(bias.data().begin(), bias.data().end(), T(0));
  }

  int kernel() const { return weight.dim(2); }
  int out_channels() const { return weight.dim(0); }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, groups); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight, role});
    if (bias.defined()) out.push_back({prefix + ".bias", bias, role});
  }
};

template <class T>
struct BatchNorm2d {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels)
      : gamma({channels}, T(1), true),
        beta({channels}, T(0), true),
        running_mean({channels}, T(0)),
        running_var({channels}, T(1)) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, mode == Mode::Train, momentum, eps);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", gamma, Role::Trainable});
    out.push_back({prefix + ".bias", beta, Role::Trainable});
    out.push_back({prefix + ".running_mean", running_mean, Role::Buffer});
    out.push_back({prefix + ".running_var", running_var, Role::Buffer});
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;
  Role role = Role::Trainable;
  T eps = T(1e-6);

  LayerNorm() = default;
  LayerNorm(int width, bool trainable = true)
      : gamma({width}, T(1)), beta({width}, T(0)), role(param_role(trainable)) {
    mark(gamma, role);
    mark(beta, role);
  }

  void set_role(Role r) {
    role = r;
    mark(gamma, r);
    mark(beta, r);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", gamma, role});
    out.push_back({prefix + ".bias", beta, role});
  }
};

template <class T>
std::size_t count_elements(const ParamList<T>& params, bool include_buffers = false) {
  std::size_t n = 0;
  for (const auto& p : params)
    if (include_buffers || p.role != Role::Buffer) n += p.tensor.numel();
  return n;
}

// FNV-1a over names, shapes and raw bytes of the selected tensors.
template <class T>
std::uint64_t fingerprint(const ParamList<T>& params, Role role) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params) {
    if (p.role != role) continue;
    mix(p.name.data(), p.name.size());
    for (int d : p.tensor.shape()) mix(&d, sizeof d);
    mix(p.tensor.ptr(), p.tensor.numel() * sizeof(T));
  }
  return h;
}

}  // namespace tripath
