#pragma once

// AdamW with decoupled weight decay:
//   w <- w * (1 - lr * wd)
//   w <- w - lr * m_hat / (sqrt(v_hat) + eps)
// A parameter with no gradient this step is treated as having a zero one.

#include <cmath>
#include <string>
#include <vector>

#include "tripath/archive.hpp"
#include "tripath/nn.hpp"

namespace tripath {

struct AdamWOptions {
  double lr = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
class AdamW {
 public:
  AdamW(ParamList<T> params, AdamWOptions opt) : params_(std::move(params)), opt_(opt) {
    if (!(opt_.lr > 0)) throw InvalidArg("lr", "learning rate must be positive");
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), T(0));
      v_.emplace_back(p.tensor.numel(), T(0));
    }
  }

  const AdamWOptions& options() const { return opt_; }
  long steps() const { return step_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    const T decay = static_cast<T>(1.0 - opt_.lr * opt_.weight_decay);
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    const T lr = static_cast<T>(opt_.lr), eps = static_cast<T>(opt_.eps);
    const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto w = params_[k].tensor.data();
      auto g = params_[k].tensor.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T gi = g.empty() ? T(0) : g[i];
        w[i] = w[i] * decay;
        m[i] = b1 * m[i] + (T(1) - b1) * gi;
        v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
        w[i] = w[i] - lr * (m[i] * inv_bc1) / (std::sqrt(v[i] * inv_bc2) + eps);
      }
    }
  }

  void save_state(Archive& a) const {
    a.metadata["optimizer"] = {{"algorithm", "adamw"},
                               {"step", step_},
                               {"lr", opt_.lr},
                               {"weight_decay", opt_.weight_decay},
                               {"beta1", opt_.beta1},
                               {"beta2", opt_.beta2},
                               {"eps", opt_.eps}};
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const Shape& s = params_[k].tensor.shape();
      a.put("optim.m." + params_[k].name, Tensor<T>::from(s, m_[k]));
      a.put("optim.v." + params_[k].name, Tensor<T>::from(s, v_[k]));
    }
  }

  void load_state(const Archive& a) {
    if (!a.metadata.contains("optimizer")) throw MissingTensor("optimizer", "archive has no optimizer state");
    step_ = a.metadata["optimizer"].at("step").get<long>();
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const Shape& s = params_[k].tensor.shape();
      Tensor<T> m(s), v(s);
      a.get_into("optim.m." + params_[k].name, m);
      a.get_into("optim.v." + params_[k].name, v);
      m_[k].assign(m.data().begin(), m.data().end());
      v_[k].assign(v.data().begin(), v.data().end());
    }
  }

 private:
  ParamList<T> params_;
  AdamWOptions opt_;
  std::vector<std::vector<T>> m_, v_;
  long step_ = 0;
};

}  // namespace tripath
