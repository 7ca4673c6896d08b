#pragma once

// Segmentation losses over [B, C, H, W] logits and a [B, H, W] label mask
// (C = number of change classes + 1, class 0 = no change). Each loss is a
// fused op: the forward pass also forms d(loss)/d(logits), which backward
// scales by the upstream gradient.

#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "tripath/ops.hpp"

namespace tripath {

struct LossWeights {
  double alpha = 0.4;  // focal
  double beta = 0.3;   // dice
  double gamma_focal = 2.0;
  double dice_smooth = 1e-6;

  double lovasz_weight() const { return 1.0 - alpha - beta; }

  void validate() const {
    if (alpha < 0 || beta < 0 || alpha > 1 || beta > 1 || alpha + beta > 1)
      throw InvalidWeights("alpha=" + std::to_string(alpha) + ",beta=" + std::to_string(beta),
                           "need alpha, beta in [0,1] with alpha + beta <= 1");
    if (gamma_focal < 0) throw InvalidWeights("gamma_focal", "must be non-negative");
    if (!(dice_smooth > 0)) throw InvalidWeights("dice_smooth", "must be positive");
  }
};

namespace detail {

struct PixelLayout {
  std::size_t batch, classes, plane;
  std::size_t pixels() const { return batch * plane; }
  std::size_t at(std::size_t pixel, std::size_t c) const {
    return ((pixel / plane) * classes + c) * plane + pixel % plane;
  }
};

template <class T>
PixelLayout check_inputs(const Tensor<T>& logits, std::span<const std::uint8_t> mask) {
  if (logits.rank() != 4) throw ShapeError(to_string(logits.shape()), "logits must be [B, C, H, W]");
  PixelLayout l{static_cast<std::size_t>(logits.dim(0)), static_cast<std::size_t>(logits.dim(1)),
                static_cast<std::size_t>(logits.dim(2)) * static_cast<std::size_t>(logits.dim(3))};
  if (mask.size() != l.pixels())
    throw ShapeMismatch(to_string(logits.shape()), "mask has " + std::to_string(mask.size()) + " pixels");
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] >= l.classes)
      throw LabelOutOfRange("pixel " + std::to_string(i),
                            "label " + std::to_string(mask[i]) + " exceeds " + std::to_string(l.classes - 1));
  return l;
}

// Per-pixel softmax probabilities and log-probabilities in logits layout.
template <class T>
void softmax_channels(const Tensor<T>& logits, const PixelLayout& l, std::vector<T>& prob, std::vector<T>& logp) {
  prob.resize(logits.numel());
  logp.resize(logits.numel());
  const T* z = logits.ptr();
  for (std::size_t px = 0; px < l.pixels(); ++px) {
    T mx = z[l.at(px, 0)];
    for (std::size_t c = 1; c < l.classes; ++c) mx = std::max(mx, z[l.at(px, c)]);
    T s(0);
    for (std::size_t c = 0; c < l.classes; ++c) s += std::exp(z[l.at(px, c)] - mx);
    const T lse = std::log(s);
    for (std::size_t c = 0; c < l.classes; ++c) {
      const std::size_t i = l.at(px, c);
      logp[i] = z[i] - mx - lse;
      prob[i] = std::exp(logp[i]);
    }
  }
}

// Maps d(loss)/d(prob) to d(loss)/d(logits) through the per-pixel softmax.
template <class T>
void softmax_backward(const std::vector<T>& prob, const std::vector<T>& dprob, const PixelLayout& l, std::vector<T>& dz) {
  dz.assign(prob.size(), T(0));
  for (std::size_t px = 0; px < l.pixels(); ++px) {
    T dot(0);
    for (std::size_t c = 0; c < l.classes; ++c) dot += dprob[l.at(px, c)] * prob[l.at(px, c)];
    for (std::size_t c = 0; c < l.classes; ++c) {
      const std::size_t i = l.at(px, c);
      dz[i] = prob[i] * (dprob[i] - dot);
    }
  }
}

template <class T>
Tensor<T> fused_scalar(const Tensor<T>& logits, T value, std::vector<T> dz) {
  Tensor<T> out = make_result<T>({}, {&logits});
  out.data()[0] = value;
  if (out.requires_grad()) {
    auto grad = std::make_shared<std::vector<T>>(std::move(dz));
    out.node()->backward_fn = [logits, grad](Node<T>& self) {
      T* g = grad_ptr(logits);
      const T up = self.grad[0];
      for (std::size_t i = 0; i < grad->size(); ++i) g[i] += up * (*grad)[i];
    };
  }
  return out;
}

// Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors.
template <class T>
std::vector<T> lovasz_grad(const std::vector<std::uint8_t>& gt_sorted) {
  const std::size_t n = gt_sorted.size();
  std::vector<T> jac(n);
  const T gts = static_cast<T>(std::accumulate(gt_sorted.begin(), gt_sorted.end(), std::size_t{0}));
  T cum_fg(0), cum_bg(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (gt_sorted[i]) cum_fg += T(1);
    else cum_bg += T(1);
    const T inter = gts - cum_fg;
    const T uni = gts + cum_bg;
    jac[i] = T(1) - inter / uni;
  }
  for (std::size_t i = n; i-- > 1;) jac[i] -= jac[i - 1];
  return jac;
}

}  // namespace detail

// Mean over pixels of -(1 - p_t)^gamma * log p_t.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& logits, std::span<const std::uint8_t> mask, double gamma = 2.0) {
  const auto l = detail::check_inputs(logits, mask);
  std::vector<T> prob, logp;
  detail::softmax_channels(logits, l, prob, logp);
  const T g = static_cast<T>(gamma);
  const T inv_n = T(1) / static_cast<T>(l.pixels());
  std::vector<T> dz(prob.size());
  T total(0);
  for (std::size_t px = 0; px < l.pixels(); ++px) {
    const std::size_t t = l.at(px, mask[px]);
    const T p = prob[t], lp = logp[t];
    const T q = T(1) - p;
    total += -std::pow(q, g) * lp;
    // d/dp_t of -(1-p)^g log p, times p_t (softmax Jacobian factor).
    T coef = -std::pow(q, g);
    if (g != T(0) && q > T(0)) coef += g * std::pow(q, g - T(1)) * p * lp;
    for (std::size_t c = 0; c < l.classes; ++c) {
      const std::size_t i = l.at(px, c);
      dz[i] = inv_n * coef * ((c == mask[px] ? T(1) : T(0)) - prob[i]);
    }
  }
  return detail::fused_scalar(logits, total * inv_n, std::move(dz));
}

// Mean over pixels of -log p_t.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> mask) {
  const auto l = detail::check_inputs(logits, mask);
  std::vector<T> prob, logp;
  detail::softmax_channels(logits, l, prob, logp);
  const T inv_n = T(1) / static_cast<T>(l.pixels());
  std::vector<T> dz(prob.size());
  T total(0);
  for (std::size_t px = 0; px < l.pixels(); ++px) {
    total += -logp[l.at(px, mask[px])];
    for (std::size_t c = 0; c < l.classes; ++c) {
      const std::size_t i = l.at(px, c);
      dz[i] = inv_n * (prob[i] - (c == mask[px] ? T(1) : T(0)));
    }
  }
  return detail::fused_scalar(logits, total * inv_n, std::move(dz));
}

// 1 - mean over all classes of (2 sum p g + s) / (sum p + sum g + s).
template <class T>
Tensor<T> dice_loss(const Tensor<T>& logits, std::span<const std::uint8_t> mask, double smooth = 1e-6) {
  const auto l = detail::check_inputs(logits, mask);
  std::vector<T> prob, logp;
  detail::softmax_channels(logits, l, prob, logp);
  const T s = static_cast<T>(smooth);
  std::vector<T> inter(l.classes, T(0)), psum(l.classes, T(0)), gsum(l.classes, T(0));
  for (std::size_t px = 0; px < l.pixels(); ++px)
    for (std::size_t c = 0; c < l.classes; ++c) {
      const T p = prob[l.at(px, c)];
      psum[c] += p;
      if (mask[px] == c) {
        inter[c] += p;
        gsum[c] += T(1);
      }
    }
  const T inv_c = T(1) / static_cast<T>(l.classes);
  T mean_coef(0);
  for (std::size_t c = 0; c < l.classes; ++c) mean_coef += (T(2) * inter[c] + s) / (psum[c] + gsum[c] + s);
  mean_coef *= inv_c;

  std::vector<T> dprob(prob.size());
  for (std::size_t px = 0; px < l.pixels(); ++px)
    for (std::size_t c = 0; c < l.classes; ++c) {
      const T den = psum[c] + gsum[c] + s;
      const T gi = mask[px] == c ? T(1) : T(0);
      dprob[l.at(px, c)] = -inv_c * (T(2) * gi * den - (T(2) * inter[c] + s)) / (den * den);
    }
  std::vector<T> dz;
  detail::softmax_backward(prob, dprob, l, dz);
  return detail::fused_scalar(logits, T(1) - mean_coef, std::move(dz));
}

// Lovasz-softmax averaged over the classes present in the mask.
template <class T>
Tensor<T> lovasz_loss(const Tensor<T>& logits, std::span<const std::uint8_t> mask) {
  const auto l = detail::check_inputs(logits, mask);
  std::vector<T> prob, logp;
  detail::softmax_channels(logits, l, prob, logp);
  const std::size_t n = l.pixels();
  std::vector<T> dprob(prob.size(), T(0));
  std::vector<T> err(n);
  std::vector<std::size_t> order(n);
  std::vector<std::uint8_t> fg_sorted(n);
  T total(0);
  std::size_t present = 0;
  std::vector<std::size_t> class_count(l.classes, 0);
  for (std::uint8_t m : mask) ++class_count[m];
  for (std::size_t c = 0; c < l.classes; ++c) {
    if (class_count[c] == 0) continue;
    ++present;
    for (std::size_t px = 0; px < n; ++px) {
      const T p = prob[l.at(px, c)];
      err[px] = mask[px] == c ? T(1) - p : p;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });
    for (std::size_t j = 0; j < n; ++j) fg_sorted[j] = mask[order[j]] == c ? 1 : 0;
    const std::vector<T> grad = detail::lovasz_grad<T>(fg_sorted);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t px = order[j];
      total += err[px] * grad[j];
      // d err / d p is -1 for the true class, +1 otherwise.
      dprob[l.at(px, c)] += (fg_sorted[j] ? -grad[j] : grad[j]);
    }
  }
  const T inv = present ? T(1) / static_cast<T>(present) : T(0);
  for (T& d : dprob) d *= inv;
  std::vector<T> dz;
  detail::softmax_backward(prob, dprob, l, dz);
  return detail::fused_scalar(logits, total * inv, std::move(dz));
}

template <class T>
struct LossTerms {
  Tensor<T> focal, dice, lovasz, total;
};

// alpha * focal + beta * dice + (1 - alpha - beta) * lovasz.
template <class T>
LossTerms<T> loss_terms(const Tensor<T>& logits, std::span<const std::uint8_t> mask, const LossWeights& w) {
  w.validate();
  LossTerms<T> r;
  r.focal = focal_loss(logits, mask, w.gamma_focal);
  r.dice = dice_loss(logits, mask, w.dice_smooth);
  r.lovasz = lovasz_loss(logits, mask);
  r.total = add(add(scale(r.focal, static_cast<T>(w.alpha)), scale(r.dice, static_cast<T>(w.beta))),
                scale(r.lovasz, static_cast<T>(w.lovasz_weight())));
  return r;
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& logits, std::span<const std::uint8_t> mask, const LossWeights& w = {}) {
  return loss_terms(logits, mask, w).total;
}

}  // namespace tripath
