#pragma once

#include <cmath>

#include "tripath/nn.hpp"

namespace tripath {

// Fixed 2-D sine/cosine position table, [1, h*w, dim]. The first half of the
// channels encodes the row, the second half the column.
template <class T>
Tensor<T> sincos_position_2d(int h, int w, int dim) {
  if (dim % 4 != 0) throw InvalidArg("dim=" + std::to_string(dim), "2-D position encoding needs dim % 4 == 0");
  const int quarter = dim / 4;
  Tensor<T> pe({1, h * w, dim});
  T* p = pe.ptr();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T* row = p + static_cast<std::size_t>(y * w + x) * dim;
      for (int i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
        row[i] = static_cast<T>(std::sin(y * omega));
        row[quarter + i] = static_cast<T>(std::cos(y * omega));
        row[2 * quarter + i] = static_cast<T>(std::sin(x * omega));
        row[3 * quarter + i] = static_cast<T>(std::cos(x * omega));
      }
    }
  return pe;
}

// softmax(Q K^T / sqrt(d_head)) V computed per head. q is [B, n, d], k and v
// are [B, m, d]. When `probs` is given it receives the [B*heads, n, m]
// attention weights.
template <class T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                                       Tensor<T>* probs = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw ShapeError(to_string(q.shape()), "attention expects [B, n, d]");
  const int b = q.dim(0), n = q.dim(1), d = q.dim(2), m = k.dim(1);
  if (k.dim(2) != d || v.dim(2) != d || v.dim(1) != m || k.dim(0) != b || v.dim(0) != b)
    throw ShapeMismatch(to_string(q.shape()) + "/" + to_string(k.shape()) + "/" + to_string(v.shape()), "attention");
  if (heads < 1 || d % heads != 0) throw InvalidArg("heads=" + std::to_string(heads), "width must divide by heads");
  const int dh = d / heads;
  auto split = [&](const Tensor<T>& t, int len) {
    return reshape(permute(reshape(t, {b, len, heads, dh}), {0, 2, 1, 3}), {b * heads, len, dh});
  };
  Tensor<T> qh = split(q, n), kh = split(k, m), vh = split(v, m);
  Tensor<T> scores = scale(matmul(qh, kh, false, true), T(1) / std::sqrt(static_cast<T>(dh)));
  Tensor<T> p = softmax(scores);
  if (probs) *probs = p;
  Tensor<T> out = matmul(p, vh);
  return reshape(permute(reshape(out, {b, heads, n, dh}), {0, 2, 1, 3}), {b, n, d});
}

// Multi-head attention with learned input and output projections.
template <class T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(int width, int heads_, Rng& rng)
      : wq(width, width, rng), wk(width, width, rng), wv(width, width, rng), wo(width, width, rng), heads(heads_) {
    if (width % heads != 0) throw InvalidArg("heads=" + std::to_string(heads), "width must divide by heads");
  }

  Tensor<T> operator()(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tensor<T>* probs = nullptr) const {
    return wo(scaled_dot_product_attention(wq(q), wk(k), wv(v), heads, probs));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    wq.collect(prefix + ".q", out);
    wk.collect(prefix + ".k", out);
    wv.collect(prefix + ".v", out);
    wo.collect(prefix + ".proj", out);
  }
};

}  // namespace tripath
