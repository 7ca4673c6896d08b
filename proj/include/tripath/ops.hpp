#pragma once

// Differentiable tensor operations. Image-like tensors are NCHW, token
// sequences are [batch, tokens, width]. All convolutions are stride 1.

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "tripath/tensor.hpp"

namespace tripath {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
T* grad_ptr(const Tensor<T>& t) {
  return t.node()->grad_data();
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) throw ShapeMismatch(to_string(a) + " vs " + to_string(b), "broadcast needs equal rank");
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      throw ShapeMismatch(to_string(a) + " vs " + to_string(b), "not broadcastable");
    }
  }
  return out;
}

// Maps every output element to the source element of `in` under broadcasting.
inline std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > 0;) {
    stride[i] = in[i] == 1 ? 0 : s;
    s *= static_cast<std::size_t>(in[i]);
  }
  std::vector<std::size_t> map(numel(out));
  std::vector<int> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t lin = 0; lin < map.size(); ++lin) {
    map[lin] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += stride[d];
      if (idx[d] < out[d]) break;
      src -= stride[d] * static_cast<std::size_t>(idx[d]);
      idx[d] = 0;
    }
  }
  return map;
}

enum class BinaryKind { Add, Sub, Mul };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
  if (a.shape() == b.shape()) {
    Tensor<T> out = make_result<T>(a.shape(), {&a, &b});
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    const std::size_t n = out.numel();
    switch (kind) {
      case BinaryKind::Add: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinaryKind::Sub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinaryKind::Mul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
    }
    if (out.requires_grad()) {
      out.node()->backward_fn = [a, b, kind](Node<T>& self) {
        const T* g = self.grad.data();
        const std::size_t n = self.value.size();
        if (a.requires_grad()) {
          T* ga = grad_ptr(a);
          if (kind == BinaryKind::Mul) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b.ptr()[i];
          } else {
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
          }
        }
        if (b.requires_grad()) {
          T* gb = grad_ptr(b);
          switch (kind) {
            case BinaryKind::Add: for (std::size_t i = 0; i < n; ++i) gb[i] += g[i]; break;
            case BinaryKind::Sub: for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i]; break;
            case BinaryKind::Mul: for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a.ptr()[i]; break;
          }
        }
      };
    }
    return out;
  }

  Shape shape = broadcast_shape(a.shape(), b.shape());
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(shape, a.shape()));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(shape, b.shape()));
  Tensor<T> out = make_result<T>(shape, {&a, &b});
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T x = pa[(*ia)[i]];
    const T y = pb[(*ib)[i]];
    po[i] = kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [a, b, kind, ia, ib](Node<T>& self) {
      const T* g = self.grad.data();
      const std::size_t n = self.value.size();
      if (a.requires_grad()) {
        T* ga = grad_ptr(a);
        for (std::size_t i = 0; i < n; ++i)
          ga[(*ia)[i]] += kind == BinaryKind::Mul ? g[i] * b.ptr()[(*ib)[i]] : g[i];
      }
      if (b.requires_grad()) {
        T* gb = grad_ptr(b);
        for (std::size_t i = 0; i < n; ++i) {
          const T d = kind == BinaryKind::Add ? g[i]
                      : kind == BinaryKind::Sub ? -g[i]
                                                : g[i] * a.ptr()[(*ia)[i]];
          gb[(*ib)[i]] += d;
        }
      }
    };
  }
  return out;
}

// Elementwise op given f(x) and f'(x, f(x)).
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& a, F f, DF df) {
  Tensor<T> out = make_result<T>(a.shape(), {&a});
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = f(pa[i]);
  if (out.requires_grad()) {
    out.node()->backward_fn = [a, df](Node<T>& self) {
      T* ga = grad_ptr(a);
      const T* pa = a.ptr();
      for (std::size_t i = 0; i < self.value.size(); ++i)
        ga[i] += self.grad[i] * df(pa[i], self.value[i]);
    };
  }
  return out;
}

}  // namespace detail

// Broadcasting arithmetic (equal rank; a dim broadcasts when it is 1).
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary(a, b, detail::BinaryKind::Add); }
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary(a, b, detail::BinaryKind::Sub); }
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return detail::binary(a, b, detail::BinaryKind::Mul); }

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      });
}

template <class T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return sigmoid_value(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = make_result<T>({}, {&a});
  T acc(0);
  for (T v : a.data()) acc += v;
  out.data()[0] = acc;
  if (out.requires_grad()) {
    out.node()->backward_fn = [a](Node<T>& self) {
      T* ga = detail::grad_ptr(a);
      for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += self.grad[0];
    };
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeMismatch(to_string(a.shape()) + " -> " + to_string(shape), "reshape changes element count");
  Tensor<T> out = make_result<T>(std::move(shape), {&a});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  if (out.requires_grad()) {
    out.node()->backward_fn = [a](Node<T>& self) {
      T* ga = detail::grad_ptr(a);
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    };
  }
  return out;
}

// out.shape[i] = a.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  const std::size_t rank = a.shape().size();
  if (perm.size() != rank) throw ShapeError(to_string(a.shape()), "permutation rank mismatch");
  Shape shape(rank);
  std::vector<std::size_t> in_stride(rank), src_stride(rank);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > 0;) {
    in_stride[i] = s;
    s *= static_cast<std::size_t>(a.shape()[i]);
  }
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = a.shape()[static_cast<std::size_t>(perm[i])];
    src_stride[i] = in_stride[static_cast<std::size_t>(perm[i])];
  }
  auto map = std::make_shared<std::vector<std::size_t>>(numel(shape));
  {
    std::vector<int> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t lin = 0; lin < map->size(); ++lin) {
      (*map)[lin] = src;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        src += src_stride[d];
        if (idx[d] < shape[d]) break;
        src -= src_stride[d] * static_cast<std::size_t>(idx[d]);
        idx[d] = 0;
      }
    }
  }
  Tensor<T> out = make_result<T>(shape, {&a});
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < map->size(); ++i) po[i] = pa[(*map)[i]];
  if (out.requires_grad()) {
    out.node()->backward_fn = [a, map](Node<T>& self) {
      T* ga = detail::grad_ptr(a);
      for (std::size_t i = 0; i < map->size(); ++i) ga[(*map)[i]] += self.grad[i];
    };
  }
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw InvalidArg("concat", "no inputs");
  Shape shape = parts.front().shape();
  const std::size_t ax = static_cast<std::size_t>(axis);
  int total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeMismatch(to_string(s), "concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != shape[i]) throw ShapeMismatch(to_string(s) + " vs " + to_string(shape), "concat");
    total += s[ax];
  }
  shape[ax] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= static_cast<std::size_t>(shape[i]);
  for (std::size_t i = ax + 1; i < shape.size(); ++i) inner *= static_cast<std::size_t>(shape[i]);

  Tensor<T> out = make_result<T>(shape, parts);
  T* po = out.ptr();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = static_cast<std::size_t>(p.shape()[ax]) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.ptr() + o * chunk, chunk, po + o * static_cast<std::size_t>(total) * inner + offset);
    offset += chunk;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [parts, outer, inner, total, ax](Node<T>& self) {
      std::size_t offset = 0;
      for (const auto& p : parts) {
        const std::size_t chunk = static_cast<std::size_t>(p.shape()[ax]) * inner;
        if (p.requires_grad()) {
          T* gp = detail::grad_ptr(p);
          for (std::size_t o = 0; o < outer; ++o) {
            const T* g = self.grad.data() + o * static_cast<std::size_t>(total) * inner + offset;
            for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[i];
          }
        }
        offset += chunk;
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int length) {
  const std::size_t ax = static_cast<std::size_t>(axis);
  if (start < 0 || length < 0 || start + length > a.shape()[ax])
    throw ShapeError(to_string(a.shape()), "slice out of range");
  Shape shape = a.shape();
  shape[ax] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= static_cast<std::size_t>(shape[i]);
  for (std::size_t i = ax + 1; i < shape.size(); ++i) inner *= static_cast<std::size_t>(shape[i]);
  const std::size_t src_chunk = static_cast<std::size_t>(a.shape()[ax]) * inner;
  const std::size_t chunk = static_cast<std::size_t>(length) * inner;
  const std::size_t off = static_cast<std::size_t>(start) * inner;

  Tensor<T> out = make_result<T>(shape, {&a});
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(a.ptr() + o * src_chunk + off, chunk, out.ptr() + o * chunk);
  if (out.requires_grad()) {
    out.node()->backward_fn = [a, outer, src_chunk, chunk, off](Node<T>& self) {
      T* ga = detail::grad_ptr(a);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < chunk; ++i) ga[o * src_chunk + off + i] += self.grad[o * chunk + i];
    };
  }
  return out;
}

// Batched matrix product over rank-2 or rank-3 operands with optional
// transposition of either side.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  using detail::CMapMat;
  using detail::MapMat;
  if (a.rank() != b.rank() || a.rank() < 2 || a.rank() > 3)
    throw ShapeError(to_string(a.shape()) + " x " + to_string(b.shape()), "matmul rank");
  const int batch = a.rank() == 3 ? a.dim(0) : 1;
  if (a.rank() == 3 && b.dim(0) != batch) throw ShapeMismatch(to_string(a.shape()) + " x " + to_string(b.shape()), "batch");
  const int ar = a.dim(-2), ac = a.dim(-1), br = b.dim(-2), bc = b.dim(-1);
  const int m = trans_a ? ac : ar;
  const int k = trans_a ? ar : ac;
  const int kb = trans_b ? bc : br;
  const int n = trans_b ? br : bc;
  if (k != kb) throw ShapeMismatch(to_string(a.shape()) + " x " + to_string(b.shape()), "inner dims");
  Shape shape = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
  Tensor<T> out = make_result<T>(shape, {&a, &b});
  const std::size_t sa = static_cast<std::size_t>(ar) * ac, sb = static_cast<std::size_t>(br) * bc,
                    so = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < batch; ++i) {
    CMapMat<T> A(a.ptr() + i * sa, ar, ac);
    CMapMat<T> B(b.ptr() + i * sb, br, bc);
    MapMat<T> C(out.ptr() + i * so, m, n);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [a, b, trans_a, trans_b, batch, ar, ac, br, bc, m, n, sa, sb, so](Node<T>& self) {
      for (int i = 0; i < batch; ++i) {
        CMapMat<T> A(a.ptr() + i * sa, ar, ac);
        CMapMat<T> B(b.ptr() + i * sb, br, bc);
        CMapMat<T> G(self.grad.data() + i * so, m, n);
        if (a.requires_grad()) {
          MapMat<T> GA(detail::grad_ptr(a) + i * sa, ar, ac);
          if (!trans_a) {
            if (trans_b) GA.noalias() += G * B;
            else GA.noalias() += G * B.transpose();
          } else {
            if (trans_b) GA.noalias() += B.transpose() * G.transpose();
            else GA.noalias() += B * G.transpose();
          }
        }
        if (b.requires_grad()) {
          MapMat<T> GB(detail::grad_ptr(b) + i * sb, br, bc);
          if (!trans_b) {
            if (trans_a) GB.noalias() += A * G;
            else GB.noalias() += A.transpose() * G;
          } else {
            if (trans_a) GB.noalias() += G.transpose() * A.transpose();
            else GB.noalias() += G.transpose() * A;
          }
        }
      }
    };
  }
  return out;
}

// y = x W^T + b over the last axis; W is [out, in], b (optional) is [out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  using detail::CMapMat;
  using detail::MapMat;
  const int in = x.dim(-1);
  if (w.rank() != 2 || w.dim(1) != in)
    throw ShapeMismatch(to_string(x.shape()) + " * " + to_string(w.shape()), "linear");
  const int out_f = w.dim(0);
  const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(in));
  Shape shape = x.shape();
  shape.back() = out_f;
  Tensor<T> out = b.defined() ? make_result<T>(shape, {&x, &w, &b}) : make_result<T>(shape, {&x, &w});
  CMapMat<T> X(x.ptr(), rows, in);
  CMapMat<T> W(w.ptr(), out_f, in);
  MapMat<T> Y(out.ptr(), rows, out_f);
  Y.noalias() = X * W.transpose();
  if (b.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> B(b.ptr(), out_f);
    Y.rowwise() += B;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [x, w, b, rows, in, out_f](Node<T>& self) {
      CMapMat<T> G(self.grad.data(), rows, out_f);
      if (x.requires_grad()) {
        MapMat<T> GX(detail::grad_ptr(x), rows, in);
        GX.noalias() += G * CMapMat<T>(w.ptr(), out_f, in);
      }
      if (w.requires_grad()) {
        MapMat<T> GW(detail::grad_ptr(w), out_f, in);
        GW.noalias() += G.transpose() * CMapMat<T>(x.ptr(), rows, in);
      }
      if (b.defined() && b.requires_grad()) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(detail::grad_ptr(b), out_f);
        GB += G.colwise().sum();
      }
    };
  }
  return out;
}

// Softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  const std::size_t width = static_cast<std::size_t>(a.dim(-1));
  const std::size_t rows = a.numel() / width;
  Tensor<T> out = make_result<T>(a.shape(), {&a});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.ptr() + r * width;
    T* y = out.ptr() + r * width;
    T mx = x[0];
    for (std::size_t i = 1; i < width; ++i) mx = std::max(mx, x[i]);
    T z(0);
    for (std::size_t i = 0; i < width; ++i) z += (y[i] = std::exp(x[i] - mx));
    for (std::size_t i = 0; i < width; ++i) y[i] /= z;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [a, rows, width](Node<T>& self) {
      T* ga = detail::grad_ptr(a);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * width;
        const T* g = self.grad.data() + r * width;
        T dot(0);
        for (std::size_t i = 0; i < width; ++i) dot += g[i] * y[i];
        for (std::size_t i = 0; i < width; ++i) ga[r * width + i] += y[i] * (g[i] - dot);
      }
    };
  }
  return out;
}

// Normalizes over the last axis, then applies per-feature gain and shift.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
  const std::size_t width = static_cast<std::size_t>(x.dim(-1));
  if (gamma.numel() != width || beta.numel() != width) throw ShapeMismatch(to_string(x.shape()), "layer_norm params");
  const std::size_t rows = x.numel() / width;
  Tensor<T> out = make_result<T>(x.shape(), {&x, &gamma, &beta});
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* px = x.ptr() + r * width;
    T mu(0);
    for (std::size_t i = 0; i < width; ++i) mu += px[i];
    mu /= static_cast<T>(width);
    T var(0);
    for (std::size_t i = 0; i < width; ++i) var += (px[i] - mu) * (px[i] - mu);
    var /= static_cast<T>(width);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < width; ++i) {
      const T h = (px[i] - mu) * is;
      (*xhat)[r * width + i] = h;
      out.ptr()[r * width + i] = gamma.ptr()[i] * h + beta.ptr()[i];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [x, gamma, beta, xhat, inv_std, rows, width](Node<T>& self) {
      const T* g = self.grad.data();
      if (gamma.requires_grad()) {
        T* gg = detail::grad_ptr(gamma);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < width; ++i) gg[i] += g[r * width + i] * (*xhat)[r * width + i];
      }
      if (beta.requires_grad()) {
        T* gb = detail::grad_ptr(beta);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < width; ++i) gb[i] += g[r * width + i];
      }
      if (x.requires_grad()) {
        T* gx = detail::grad_ptr(x);
        const T n = static_cast<T>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          T s1(0), s2(0);
          for (std::size_t i = 0; i < width; ++i) {
            const T dh = g[r * width + i] * gamma.ptr()[i];
            s1 += dh;
            s2 += dh * (*xhat)[r * width + i];
          }
          const T is = (*inv_std)[r];
          for (std::size_t i = 0; i < width; ++i) {
            const T dh = g[r * width + i] * gamma.ptr()[i];
            gx[r * width + i] += is / n * (n * dh - s1 - (*xhat)[r * width + i] * s2);
          }
        }
      }
    };
  }
  return out;
}

// Batch normalization over N, H, W per channel. In training mode the batch
// statistics are used and the running estimates are updated in place
// (unbiased variance, PyTorch convention); otherwise the running estimates
// normalize the input.
template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 4) throw ShapeError(to_string(x.shape()), "batch_norm2d expects NCHW");
  const std::size_t nb = static_cast<std::size_t>(x.dim(0)), c = static_cast<std::size_t>(x.dim(1)),
                    hw = static_cast<std::size_t>(x.dim(2)) * static_cast<std::size_t>(x.dim(3));
  if (gamma.numel() != c) throw ShapeMismatch(to_string(x.shape()), "batch_norm2d params");
  const std::size_t count = nb * hw;
  Tensor<T> out = make_result<T>(x.shape(), {&x, &gamma, &beta});
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      mu = T(0);
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < hw; ++i) mu += x.ptr()[(b * c + ch) * hw + i];
      mu /= static_cast<T>(count);
      var = T(0);
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = x.ptr()[(b * c + ch) * hw + i] - mu;
          var += d * d;
        }
      var /= static_cast<T>(count);
      const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
      running_mean.data()[ch] = (T(1) - momentum) * running_mean.data()[ch] + momentum * mu;
      running_var.data()[ch] = (T(1) - momentum) * running_var.data()[ch] + momentum * unbiased;
    } else {
      mu = running_mean.data()[ch];
      var = running_var.data()[ch];
    }
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[ch] = is;
    const T gm = gamma.ptr()[ch], bt = beta.ptr()[ch];
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        const T h = (x.ptr()[idx] - mu) * is;
        (*xhat)[idx] = h;
        out.ptr()[idx] = gm * h + bt;
      }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [x, gamma, beta, xhat, inv_std, nb, c, hw, count, training](Node<T>& self) {
      const T* g = self.grad.data();
      for (std::size_t ch = 0; ch < c; ++ch) {
        T sg(0), sgh(0);
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = (b * c + ch) * hw + i;
            sg += g[idx];
            sgh += g[idx] * (*xhat)[idx];
          }
        if (gamma.requires_grad()) detail::grad_ptr(gamma)[ch] += sgh;
        if (beta.requires_grad()) detail::grad_ptr(beta)[ch] += sg;
        if (!x.requires_grad()) continue;
        T* gx = detail::grad_ptr(x);
        const T gm = gamma.ptr()[ch];
        const T is = (*inv_std)[ch];
        const T n = static_cast<T>(count);
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = (b * c + ch) * hw + i;
            if (training) {
              gx[idx] += gm * is / n * (n * g[idx] - sg - (*xhat)[idx] * sgh);
            } else {
              gx[idx] += gm * is * g[idx];
            }
          }
      }
    };
  }
  return out;
}

namespace detail {

// Unfolds one CHW image into [C*k*k, H*W] columns for a same-size convolution.
template <class T>
void im2col(const T* img, int c, int h, int w, int k, int pad, T* col) {
  const int hw = h * w;
  for (int ch = 0; ch < c; ++ch)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + static_cast<std::size_t>((ch * k + ki) * k + kj) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ki - pad;
          T* dst = row + y * w;
          if (sy < 0 || sy >= h) {
            std::fill_n(dst, w, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(ch) * h + sy) * w;
          for (int x = 0; x < w; ++x) {
            const int sx = x + kj - pad;
            dst[x] = (sx < 0 || sx >= w) ? T(0) : src[sx];
          }
        }
      }
}

template <class T>
void col2im(const T* col, int c, int h, int w, int k, int pad, T* img) {
  const int hw = h * w;
  for (int ch = 0; ch < c; ++ch)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + static_cast<std::size_t>((ch * k + ki) * k + kj) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ki - pad;
          if (sy < 0 || sy >= h) continue;
          T* dst = img + (static_cast<std::size_t>(ch) * h + sy) * w;
          for (int x = 0; x < w; ++x) {
            const int sx = x + kj - pad;
            if (sx >= 0 && sx < w) dst[sx] += row[y * w + x];
          }
        }
      }
}

}  // namespace detail

// Same-size 2-D convolution, stride 1, padding (k-1)/2. Supports dense
// (groups == 1) and depthwise (groups == C_in == C_out) weights
// [C_out, C_in/groups, k, k]; bias optional.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}, int groups = 1) {
  using detail::CMapMat;
  using detail::MapMat;
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError(to_string(x.shape()), "conv2d expects NCHW input");
  const int nb = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int oc = w.dim(0), k = w.dim(2);
  if (k % 2 == 0 || w.dim(3) != k) throw ShapeError(to_string(w.shape()), "conv2d kernel must be odd and square");
  const bool depthwise = groups != 1;
  if (depthwise && (groups != c || oc != c || w.dim(1) != 1))
    throw ShapeError(to_string(w.shape()), "only dense or depthwise convolution is supported");
  if (!depthwise && w.dim(1) != c) throw ShapeMismatch(to_string(x.shape()) + " * " + to_string(w.shape()), "conv2d");
  const int pad = (k - 1) / 2;
  const int hw = h * wd;
  const int ck = c * k * k;
  Tensor<T> out = b.defined() ? make_result<T>({nb, oc, h, wd}, {&x, &w, &b}) : make_result<T>({nb, oc, h, wd}, {&x, &w});

  if (!depthwise) {
    Buffer<T> col(static_cast<std::size_t>(ck) * hw);
    CMapMat<T> W(w.ptr(), oc, ck);
    for (int n = 0; n < nb; ++n) {
      detail::im2col(x.ptr() + static_cast<std::size_t>(n) * c * hw, c, h, wd, k, pad, col.data());
      MapMat<T> Y(out.ptr() + static_cast<std::size_t>(n) * oc * hw, oc, hw);
      Y.noalias() = W * CMapMat<T>(col.data(), ck, hw);
      if (b.defined())
        for (int o = 0; o < oc; ++o) Y.row(o).array() += b.ptr()[o];
    }
  } else {
    for (int n = 0; n < nb; ++n)
      for (int ch = 0; ch < c; ++ch) {
        const T* src = x.ptr() + (static_cast<std::size_t>(n) * c + ch) * hw;
        const T* ker = w.ptr() + static_cast<std::size_t>(ch) * k * k;
        T* dst = out.ptr() + (static_cast<std::size_t>(n) * c + ch) * hw;
        const T bias = b.defined() ? b.ptr()[ch] : T(0);
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < wd; ++xx) {
            T acc = bias;
            for (int ki = 0; ki < k; ++ki) {
              const int sy = y + ki - pad;
              if (sy < 0 || sy >= h) continue;
              for (int kj = 0; kj < k; ++kj) {
                const int sx = xx + kj - pad;
                if (sx >= 0 && sx < wd) acc += ker[ki * k + kj] * src[sy * wd + sx];
              }
            }
            dst[y * wd + xx] = acc;
          }
      }
  }

  if (out.requires_grad()) {
    out.node()->backward_fn = [x, w, b, nb, c, h, wd, oc, k, pad, hw, ck, depthwise](Node<T>& self) {
      if (!depthwise) {
        Buffer<T> col(static_cast<std::size_t>(ck) * hw);
        Buffer<T> dcol(x.requires_grad() ? col.size() : 0);
        CMapMat<T> W(w.ptr(), oc, ck);
        for (int n = 0; n < nb; ++n) {
          CMapMat<T> G(self.grad.data() + static_cast<std::size_t>(n) * oc * hw, oc, hw);
          if (w.requires_grad()) {
            detail::im2col(x.ptr() + static_cast<std::size_t>(n) * c * hw, c, h, wd, k, pad, col.data());
            MapMat<T> GW(detail::grad_ptr(w), oc, ck);
            GW.noalias() += G * CMapMat<T>(col.data(), ck, hw).transpose();
          }
          if (x.requires_grad()) {
            MapMat<T>(dcol.data(), ck, hw).noalias() = W.transpose() * G;
            detail::col2im(dcol.data(), c, h, wd, k, pad, detail::grad_ptr(x) + static_cast<std::size_t>(n) * c * hw);
          }
          if (b.defined() && b.requires_grad()) {
            T* gb = detail::grad_ptr(b);
            for (int o = 0; o < oc; ++o) gb[o] += G.row(o).sum();
          }
        }
        return;
      }
      T* gx = x.requires_grad() ? detail::grad_ptr(x) : nullptr;
      T* gw = w.requires_grad() ? detail::grad_ptr(w) : nullptr;
      T* gb = b.defined() && b.requires_grad() ? detail::grad_ptr(b) : nullptr;
      for (int n = 0; n < nb; ++n)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t base = (static_cast<std::size_t>(n) * c + ch) * hw;
          const T* src = x.ptr() + base;
          const T* ker = w.ptr() + static_cast<std::size_t>(ch) * k * k;
          const T* g = self.grad.data() + base;
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < wd; ++xx) {
              const T gv = g[y * wd + xx];
              if (gb) gb[ch] += gv;
              for (int ki = 0; ki < k; ++ki) {
                const int sy = y + ki - pad;
                if (sy < 0 || sy >= h) continue;
                for (int kj = 0; kj < k; ++kj) {
                  const int sx = xx + kj - pad;
                  if (sx < 0 || sx >= wd) continue;
                  if (gw) gw[static_cast<std::size_t>(ch) * k * k + ki * k + kj] += gv * src[sy * wd + sx];
                  if (gx) gx[base + sy * wd + sx] += gv * ker[ki * k + kj];
                }
              }
            }
        }
    };
  }
  return out;
}

namespace detail {

struct Interp {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

// Half-pixel-centre sampling (align_corners = false).
inline Interp interp_table(int in, int out) {
  Interp t;
  t.lo.resize(static_cast<std::size_t>(out));
  t.hi.resize(static_cast<std::size_t>(out));
  t.frac.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(src);
    if (lo > in - 1) lo = in - 1;
    t.lo[static_cast<std::size_t>(o)] = lo;
    t.hi[static_cast<std::size_t>(o)] = std::min(lo + 1, in - 1);
    t.frac[static_cast<std::size_t>(o)] = src - lo;
  }
  return t;
}

}  // namespace detail

template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (x.rank() != 4) throw ShapeError(to_string(x.shape()), "upsample expects NCHW");
  const int planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ty = std::make_shared<detail::Interp>(detail::interp_table(h, out_h));
  auto tx = std::make_shared<detail::Interp>(detail::interp_table(w, out_w));
  Tensor<T> out = make_result<T>({x.dim(0), x.dim(1), out_h, out_w}, {&x});
  for (int p = 0; p < planes; ++p) {
    const T* src = x.ptr() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.ptr() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ty->frac[oy]);
      const T* r0 = src + ty->lo[oy] * w;
      const T* r1 = src + ty->hi[oy] * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(tx->frac[ox]);
        const int x0 = tx->lo[ox], x1 = tx->hi[ox];
        const T top = (T(1) - fx) * r0[x0] + fx * r0[x1];
        const T bot = (T(1) - fx) * r1[x0] + fx * r1[x1];
        dst[oy * out_w + ox] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [x, ty, tx, planes, h, w, out_h, out_w](Node<T>& self) {
      T* gx = detail::grad_ptr(x);
      for (int p = 0; p < planes; ++p) {
        T* dst = gx + static_cast<std::size_t>(p) * h * w;
        const T* g = self.grad.data() + static_cast<std::size_t>(p) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          const T fy = static_cast<T>(ty->frac[oy]);
          T* r0 = dst + ty->lo[oy] * w;
          T* r1 = dst + ty->hi[oy] * w;
          for (int ox = 0; ox < out_w; ++ox) {
            const T fx = static_cast<T>(tx->frac[ox]);
            const int x0 = tx->lo[ox], x1 = tx->hi[ox];
            const T gv = g[oy * out_w + ox];
            r0[x0] += (T(1) - fy) * (T(1) - fx) * gv;
            r0[x1] += (T(1) - fy) * fx * gv;
            r1[x0] += fy * (T(1) - fx) * gv;
            r1[x1] += fy * fx * gv;
          }
        }
      }
    };
  }
  return out;
}

// Mean over H and W: [N,C,H,W] -> [N,C,1,1].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError(to_string(x.shape()), "global_avg_pool expects NCHW");
  const std::size_t planes = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out = make_result<T>({x.dim(0), x.dim(1), 1, 1}, {&x});
  for (std::size_t p = 0; p < planes; ++p) {
    T acc(0);
    for (std::size_t i = 0; i < hw; ++i) acc += x.ptr()[p * hw + i];
    out.ptr()[p] = acc / static_cast<T>(hw);
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [x, planes, hw](Node<T>& self) {
      T* gx = detail::grad_ptr(x);
      for (std::size_t p = 0; p < planes; ++p) {
        const T g = self.grad[p] / static_cast<T>(hw);
        for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += g;
      }
    };
  }
  return out;
}

// [N, C, H, W] <-> [N, H*W, C].
template <class T>
Tensor<T> grid_to_tokens(const Tensor<T>& x) {
  return reshape(permute(x, {0, 2, 3, 1}), {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

template <class T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens, int h, int w) {
  if (tokens.dim(1) != h * w) throw ShapeMismatch(to_string(tokens.shape()), "token count vs grid");
  return permute(reshape(tokens, {tokens.dim(0), h, w, tokens.dim(2)}), {0, 3, 1, 2});
}

}  // namespace tripath
