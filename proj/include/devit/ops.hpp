#pragma once

// Differentiable primitives. Every op computes its forward eagerly and, when
// any input requires a gradient, attaches a backward closure that accumulates
// into the inputs' gradient buffers.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "devit/tensor.hpp"

namespace devit {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
  const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N), k = static_cast<Eigen::Index>(K);
  MapM(C, m, n).noalias() += MapC(A, m, k) * MapC(B, k, n);
}

// C[M,N] += A^T * B with A stored [K,M], B stored [K,N]
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
  const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N), k = static_cast<Eigen::Index>(K);
  MapM(C, m, n).noalias() += MapC(A, k, m).transpose() * MapC(B, k, n);
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// C[M,N] += A * B^T with A stored [M,K], B stored [N,K]
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
  const auto m = static_cast<Eigen::Index>(M), n = static_cast<Eigen::Index>(N), k = static_cast<Eigen::Index>(K);
  MapM(C, m, n).noalias() += MapC(A, m, k) * MapC(B, n, k).transpose();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op, const char* name) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": " + name + " must have rank " + std::to_string(r) +
                     ", got " + shape_str(t.shape()));
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd f, Deriv df) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  const bool rec = needs_grad({&x});
  return make_result(x.shape(), std::move(out), rec, {x}, [x, df](Node& self) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(x[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  const bool rec = detail::needs_grad({&a, &b});
  return detail::make_result(a.shape(), std::move(out), rec, {a, b}, [a, b](detail::Node& self) {
    for (const Tensor* t : {&a, &b}) {
      auto g = detail::grad_of(*t);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  const bool rec = detail::needs_grad({&a, &b});
  return detail::make_result(a.shape(), std::move(out), rec, {a, b}, [a, b](detail::Node& self) {
    auto ga = detail::grad_of(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto gb = detail::grad_of(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  const bool rec = detail::needs_grad({&a, &b});
  return detail::make_result(a.shape(), std::move(out), rec, {a, b}, [a, b](detail::Node& self) {
    auto ga = detail::grad_of(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * b[i];
    auto gb = detail::grad_of(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * a[i];
  });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

/// x scaled by a differentiable one-element tensor.
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: factor must have one element, got " + shape_str(s.shape()));
  const double sv = s[0];
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x[i];
  const bool rec = detail::needs_grad({&x, &s});
  return detail::make_result(x.shape(), std::move(out), rec, {x, s}, [x, s, sv](detail::Node& self) {
    auto gx = detail::grad_of(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * sv;
    auto gs = detail::grad_of(s);
    if (!gs.empty()) gs[0] += detail::dot(self.grad.data(), x.data().data(), x.numel());
  });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  return detail::unary(x, [slope](double v) { return v >= 0.0 ? v : slope * v; },
                       [slope](double v, double) { return v >= 0.0 ? 1.0 : slope; });
}

inline Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0); }

/// Subgradient 0 at the origin.
inline Tensor abs(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::abs(v); },
                       [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const bool rec = detail::needs_grad({&x});
  return detail::make_result(Shape{1}, {s}, rec, {x}, [x](detail::Node& self) {
    auto g = detail::grad_of(x);
    for (double& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Mean over the trailing spatial axes: [B, C, H, W] -> [B, C].
inline Tensor mean_spatial(const Tensor& x) {
  detail::require_rank(x, 4, "mean_spatial", "input");
  const std::size_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(bc, 0.0);
  for (std::size_t i = 0; i < bc; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += x[i * hw + j];
    out[i] = s / static_cast<double>(hw);
  }
  const bool rec = detail::needs_grad({&x});
  return detail::make_result(Shape{x.dim(0), x.dim(1)}, std::move(out), rec, {x}, [x, bc, hw](detail::Node& self) {
    auto g = detail::grad_of(x);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < bc; ++i)
      for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += self.grad[i] * inv;
  });
}

// ---------------------------------------------------------------- layout

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  const bool rec = detail::needs_grad({&x});
  return detail::make_result(std::move(shape), x.vec(), rec, {x}, [x](detail::Node& self) {
    auto g = detail::grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// out.flat[i] = x.flat[map[i]]; the backward pass scatter-adds.
inline Tensor remap(const Tensor& x, Shape shape, std::shared_ptr<const std::vector<std::size_t>> map) {
  if (shape_numel(shape) != map->size()) throw ShapeError("remap: map length does not match output shape");
  std::vector<double> out(map->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[(*map)[i]];
  const bool rec = detail::needs_grad({&x});
  return detail::make_result(std::move(shape), std::move(out), rec, {x}, [x, map](detail::Node& self) {
    auto g = detail::grad_of(x);
    for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += self.grad[i];
  });
}

/// Select leading-axis rows: [N, ...] -> [idx.size(), ...].
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  const std::size_t row = x.numel() / x.dim(0);
  auto map = std::make_shared<std::vector<std::size_t>>(idx.size() * row);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.dim(0)) throw std::out_of_range("gather_rows: row index out of range");
    for (std::size_t j = 0; j < row; ++j) (*map)[r * row + j] = idx[r] * row + j;
  }
  Shape s = x.shape();
  s[0] = idx.size();
  return remap(x, std::move(s), std::move(map));
}

inline Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  Shape s = xs[0].shape();
  if (axis >= s.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != s.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t a = 0; a < s.size(); ++a)
      if (a != axis && t.dim(a) != s[a])
        throw ShapeError("concat: shape mismatch on axis " + std::to_string(a) + ": " + shape_str(t.shape()) +
                         " vs " + shape_str(s));
    total += t.dim(axis);
  }
  s[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];

  std::vector<double> out(shape_numel(s));
  std::size_t off = 0;
  for (const Tensor& t : xs) {
    const std::size_t chunk = t.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(t.data().data() + o * chunk, chunk, out.data() + o * total * inner + off);
    off += chunk;
  }
  const bool rec = detail::needs_grad(xs);
  return detail::make_result(s, std::move(out), rec, xs, [xs, outer, inner, total](detail::Node& self) {
    std::size_t off = 0;
    for (const Tensor& t : xs) {
      const std::size_t chunk = t.numel() / outer;
      auto g = detail::grad_of(t);
      if (!g.empty())
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < chunk; ++j) g[o * chunk + j] += self.grad[o * total * inner + off + j];
      off += chunk;
    }
  });
}

/// Contiguous range [start, start+len) along one axis.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank() || start + len > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of bounds for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  Shape s = x.shape();
  s[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  auto map = std::make_shared<std::vector<std::size_t>>();
  map->reserve(shape_numel(s));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len * inner; ++j) map->push_back(o * x.dim(axis) * inner + start * inner + j);
  return remap(x, std::move(s), std::move(map));
}

/// Adds b[C] along axis 1 of x[B, C, ...].
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() < 2 || b.numel() != x.dim(1))
    throw ShapeError("add_channel_bias: bias " + shape_str(b.shape()) + " does not match channels of " +
                     shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), inner = x.numel() / (B * C);
  std::vector<double> out(x.numel());
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t i = (n * C + c) * inner + j;
        out[i] = x[i] + b[c];
      }
  const bool rec = detail::needs_grad({&x, &b});
  return detail::make_result(x.shape(), std::move(out), rec, {x, b}, [x, b, B, C, inner](detail::Node& self) {
    auto gx = detail::grad_of(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    auto gb = detail::grad_of(b);
    if (!gb.empty())
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t j = 0; j < inner; ++j) gb[c] += self.grad[(n * C + c) * inner + j];
  });
}

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul", "lhs");
  detail::require_rank(b, 2, "matmul", "rhs");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(M * N, 0.0);
  detail::gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data());
  const bool rec = detail::needs_grad({&a, &b});
  return detail::make_result(Shape{M, N}, std::move(out), rec, {a, b}, [a, b, M, N, K](detail::Node& self) {
    auto ga = detail::grad_of(a);
    if (!ga.empty()) detail::gemm_nt(M, K, N, self.grad.data(), b.data().data(), ga.data());
    auto gb = detail::grad_of(b);
    if (!gb.empty()) detail::gemm_tn(K, N, M, a.data().data(), self.grad.data(), gb.data());
  });
}

/// y = x W^T + b with x [B, in], W [out, in], b [out] (b may be undefined).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
  detail::require_rank(x, 2, "linear", "input");
  detail::require_rank(w, 2, "linear", "weight");
  const std::size_t B = x.dim(0), I = x.dim(1), O = w.dim(0);
  if (w.dim(1) != I)
    throw ShapeError("linear: weight " + shape_str(w.shape()) + " does not accept input " + shape_str(x.shape()));
  if (b.defined() && b.numel() != O) throw ShapeError("linear: bias length mismatch");
  std::vector<double> out(B * O, 0.0);
  detail::gemm_nt(B, O, I, x.data().data(), w.data().data(), out.data());
  if (b.defined())
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t o = 0; o < O; ++o) out[n * O + o] += b[o];
  const bool rec = detail::needs_grad({&x, &w, &b});
  return detail::make_result(Shape{B, O}, std::move(out), rec, {x, w, b}, [x, w, b, B, I, O](detail::Node& self) {
    auto gx = detail::grad_of(x);
    if (!gx.empty()) detail::gemm_nn(B, I, O, self.grad.data(), w.data().data(), gx.data());
    auto gw = detail::grad_of(w);
    if (!gw.empty()) detail::gemm_tn(O, I, B, self.grad.data(), x.data().data(), gw.data());
    auto gb = detail::grad_of(b);
    if (!gb.empty())
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o) gb[o] += self.grad[n * O + o];
  });
}

// ---------------------------------------------------------------- softmax

/// Max-shifted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) m = std::max(m, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x[base + k * inner] - m);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  const bool rec = detail::needs_grad({&x});
  return detail::make_result(x.shape(), std::move(out), rec, {x}, [x, outer, inner, len](detail::Node& self) {
    auto g = detail::grad_of(x);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double s = 0.0;
        for (std::size_t k = 0; k < len; ++k) s += self.grad[base + k * inner] * self.data[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          g[i] += self.data[i] * (self.grad[i] - s);
        }
      }
  });
}

/// Row softmax of x[R, K] restricted to entries with allowed[r*K + k] != 0.
/// Excluded entries get weight exactly 0. A row with no allowed entry throws.
inline Tensor masked_softmax_rows(const Tensor& x, std::shared_ptr<const std::vector<std::uint8_t>> allowed) {
  detail::require_rank(x, 2, "masked_softmax_rows", "input");
  const std::size_t R = x.dim(0), K = x.dim(1);
  if (allowed->size() != R * K) throw ShapeError("masked_softmax_rows: mask size mismatch");
  std::vector<double> out(R * K, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    const std::uint8_t* a = allowed->data() + r * K;
    double m = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t k = 0; k < K; ++k)
      if (a[k]) {
        any = true;
        m = std::max(m, x[r * K + k]);
      }
    if (!any)
      throw std::invalid_argument("softmax row " + std::to_string(r) + " has an empty key set");
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      if (a[k]) z += out[r * K + k] = std::exp(x[r * K + k] - m);
    for (std::size_t k = 0; k < K; ++k) out[r * K + k] /= z;
  }
  const bool rec = detail::needs_grad({&x});
  return detail::make_result(x.shape(), std::move(out), rec, {x}, [x, R, K](detail::Node& self) {
    auto g = detail::grad_of(x);
    for (std::size_t r = 0; r < R; ++r) {
      const double* y = self.data.data() + r * K;
      const double* gy = self.grad.data() + r * K;
      const double s = detail::dot(gy, y, K);
      for (std::size_t k = 0; k < K; ++k) g[r * K + k] += y[k] * (gy[k] - s);
    }
  });
}

// ---------------------------------------------------------------- convolution

namespace detail {

struct Conv2dGeom {
  std::size_t B, Ci, H, W, Co, k, stride, pad, Ho, Wo;
};

inline void im2col(const double* x, const Conv2dGeom& g, double* cols) {
  const std::size_t HWo = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.Ci; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * HWo;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            row[oy * g.Wo + ox] = (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.H) && ix < static_cast<long>(g.W))
                                      ? x[(c * g.H + iy) * g.W + ix]
                                      : 0.0;
          }
        }
      }
}

inline void col2im(const double* cols, const Conv2dGeom& g, double* x) {
  const std::size_t HWo = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.Ci; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * HWo;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.W)) continue;
            x[(c * g.H + iy) * g.W + ix] += row[oy * g.Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// Multiply-accumulate counter for instrumented FLOPs checks. Only counts
/// while a CountScope is alive on the current thread.
struct MacCounter {
  std::uint64_t conv = 0;
  std::uint64_t attention = 0;
};

namespace detail {
inline MacCounter*& active_counter() {
  thread_local MacCounter* c = nullptr;
  return c;
}
}  // namespace detail

class CountScope {
 public:
  explicit CountScope(MacCounter& c) : prev_(detail::active_counter()) { detail::active_counter() = &c; }
  ~CountScope() { detail::active_counter() = prev_; }
  CountScope(const CountScope&) = delete;
  CountScope& operator=(const CountScope&) = delete;

 private:
  MacCounter* prev_;
};

/// Cross-correlation. x [B, Ci, H, W], w [Co, Ci, k, k], b [Co] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1,
                     std::size_t padding = 0) {
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(w, 4, "conv2d", "weight");
  if (w.dim(1) != x.dim(1))
    throw ShapeError("conv2d: input channels (axis 1 of input) = " + std::to_string(x.dim(1)) +
                     " but weight expects (axis 1 of weight) = " + std::to_string(w.dim(1)));
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: only square kernels are supported");
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  detail::Conv2dGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, padding, 0, 0};
  if (g.H + 2 * g.pad < g.k || g.W + 2 * g.pad < g.k)
    throw ShapeError("conv2d: kernel " + std::to_string(g.k) + " does not fit input " + shape_str(x.shape()) +
                     " with padding " + std::to_string(padding));
  if (b.defined() && b.numel() != g.Co) throw ShapeError("conv2d: bias length must equal output channels");
  g.Ho = (g.H + 2 * g.pad - g.k) / g.stride + 1;
  g.Wo = (g.W + 2 * g.pad - g.k) / g.stride + 1;
  const std::size_t HWo = g.Ho * g.Wo, CK = g.Ci * g.k * g.k;
  const bool direct = g.k == 1 && g.stride == 1 && g.pad == 0;

  if (auto* c = detail::active_counter()) c->conv += g.B * g.Co * CK * HWo;

  std::vector<double> out(g.B * g.Co * HWo, 0.0);
  std::vector<double> cols(direct ? 0 : CK * HWo);
  for (std::size_t n = 0; n < g.B; ++n) {
    const double* xin = x.data().data() + n * g.Ci * g.H * g.W;
    const double* src = xin;
    if (!direct) {
      detail::im2col(xin, g, cols.data());
      src = cols.data();
    }
    double* o = out.data() + n * g.Co * HWo;
    if (b.defined())
      for (std::size_t co = 0; co < g.Co; ++co) std::fill_n(o + co * HWo, HWo, b[co]);
    detail::gemm_nn(g.Co, HWo, CK, w.data().data(), src, o);
  }

  const bool rec = detail::needs_grad({&x, &w, &b});
  return detail::make_result(Shape{g.B, g.Co, g.Ho, g.Wo}, std::move(out), rec, {x, w, b},
                             [x, w, b, g, direct](detail::Node& self) {
    const std::size_t HWo = g.Ho * g.Wo, CK = g.Ci * g.k * g.k;
    auto gx = detail::grad_of(x);
    auto gw = detail::grad_of(w);
    auto gb = detail::grad_of(b);
    std::vector<double> cols(direct ? 0 : CK * HWo);
    std::vector<double> dcols(direct || gx.empty() ? 0 : CK * HWo);
    for (std::size_t n = 0; n < g.B; ++n) {
      const double* go = self.grad.data() + n * g.Co * HWo;
      const double* xin = x.data().data() + n * g.Ci * g.H * g.W;
      if (!gb.empty())
        for (std::size_t co = 0; co < g.Co; ++co)
          for (std::size_t j = 0; j < HWo; ++j) gb[co] += go[co * HWo + j];
      if (!gw.empty()) {
        const double* src = xin;
        if (!direct) {
          detail::im2col(xin, g, cols.data());
          src = cols.data();
        }
        detail::gemm_nt(g.Co, CK, HWo, go, src, gw.data());
      }
      if (!gx.empty()) {
        double* gxn = gx.data() + n * g.Ci * g.H * g.W;
        if (direct) {
          detail::gemm_tn(CK, HWo, g.Co, w.data().data(), go, gxn);
        } else {
          std::fill(dcols.begin(), dcols.end(), 0.0);
          detail::gemm_tn(CK, HWo, g.Co, w.data().data(), go, dcols.data());
          detail::col2im(dcols.data(), g, gxn);
        }
      }
    }
  });
}

namespace detail {

struct Conv3dGeom {
  std::size_t Ci, T, H, W, Co, kt, kh, kw, st, sh, sw, pt, ph, pw, To, Ho, Wo;
};

inline void im2col3d(const double* x, const Conv3dGeom& g, double* cols, bool reverse) {
  const std::size_t Vo = g.To * g.Ho * g.Wo;
  double* xw = const_cast<double*>(x);
  for (std::size_t c = 0; c < g.Ci; ++c)
    for (std::size_t kt = 0; kt < g.kt; ++kt)
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          double* row = cols + (((c * g.kt + kt) * g.kh + ky) * g.kw + kx) * Vo;
          for (std::size_t ot = 0; ot < g.To; ++ot) {
            const long it = static_cast<long>(ot * g.st + kt) - static_cast<long>(g.pt);
            for (std::size_t oy = 0; oy < g.Ho; ++oy) {
              const long iy = static_cast<long>(oy * g.sh + ky) - static_cast<long>(g.ph);
              for (std::size_t ox = 0; ox < g.Wo; ++ox) {
                const long ix = static_cast<long>(ox * g.sw + kx) - static_cast<long>(g.pw);
                const std::size_t o = (ot * g.Ho + oy) * g.Wo + ox;
                const bool inside = it >= 0 && iy >= 0 && ix >= 0 && it < static_cast<long>(g.T) &&
                                    iy < static_cast<long>(g.H) && ix < static_cast<long>(g.W);
                if (!reverse) {
                  row[o] = inside ? x[((c * g.T + it) * g.H + iy) * g.W + ix] : 0.0;
                } else if (inside) {
                  xw[((c * g.T + it) * g.H + iy) * g.W + ix] += row[o];
                }
              }
            }
          }
        }
}

}  // namespace detail

/// Volumetric cross-correlation over one clip. x [Ci, T, H, W],
/// w [Co, Ci, kt, kh, kw], b [Co] or undefined.
inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, std::array<std::size_t, 3> stride,
                     std::array<std::size_t, 3> padding) {
  detail::require_rank(x, 4, "conv3d", "input");
  detail::require_rank(w, 5, "conv3d", "weight");
  if (w.dim(1) != x.dim(0))
    throw ShapeError("conv3d: input channels (axis 0 of input) = " + std::to_string(x.dim(0)) +
                     " but weight expects (axis 1 of weight) = " + std::to_string(w.dim(1)));
  detail::Conv3dGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), w.dim(4),
                       stride[0], stride[1], stride[2], padding[0], padding[1], padding[2], 0, 0, 0};
  if (g.T + 2 * g.pt < g.kt || g.H + 2 * g.ph < g.kh || g.W + 2 * g.pw < g.kw)
    throw ShapeError("conv3d: kernel does not fit input " + shape_str(x.shape()));
  g.To = (g.T + 2 * g.pt - g.kt) / g.st + 1;
  g.Ho = (g.H + 2 * g.ph - g.kh) / g.sh + 1;
  g.Wo = (g.W + 2 * g.pw - g.kw) / g.sw + 1;
  const std::size_t Vo = g.To * g.Ho * g.Wo, CK = g.Ci * g.kt * g.kh * g.kw;
  if (auto* c = detail::active_counter()) c->conv += g.Co * CK * Vo;
  std::vector<double> cols(CK * Vo);
  detail::im2col3d(x.data().data(), g, cols.data(), false);
  std::vector<double> out(g.Co * Vo, 0.0);
  if (b.defined())
    for (std::size_t co = 0; co < g.Co; ++co) std::fill_n(out.data() + co * Vo, Vo, b[co]);
  detail::gemm_nn(g.Co, Vo, CK, w.data().data(), cols.data(), out.data());

  const bool rec = detail::needs_grad({&x, &w, &b});
  return detail::make_result(Shape{g.Co, g.To, g.Ho, g.Wo}, std::move(out), rec, {x, w, b},
                             [x, w, b, g](detail::Node& self) {
    const std::size_t Vo = g.To * g.Ho * g.Wo, CK = g.Ci * g.kt * g.kh * g.kw;
    auto gb = detail::grad_of(b);
    if (!gb.empty())
      for (std::size_t co = 0; co < g.Co; ++co)
        for (std::size_t j = 0; j < Vo; ++j) gb[co] += self.grad[co * Vo + j];
    auto gw = detail::grad_of(w);
    if (!gw.empty()) {
      std::vector<double> cols(CK * Vo);
      detail::im2col3d(x.data().data(), g, cols.data(), false);
      detail::gemm_nt(g.Co, CK, Vo, self.grad.data(), cols.data(), gw.data());
    }
    auto gx = detail::grad_of(x);
    if (!gx.empty()) {
      std::vector<double> dcols(CK * Vo, 0.0);
      detail::gemm_tn(CK, Vo, g.Co, w.data().data(), self.grad.data(), dcols.data());
      detail::im2col3d(gx.data(), g, dcols.data(), true);
    }
  });
}

// ---------------------------------------------------------------- sampling
//
// Normalized coordinates use the align-corners convention: -1 and +1 are the
// centers of the first and last pixel along an axis. Samples falling outside
// the source read zeros.

namespace detail {

inline double norm_coord(std::size_t i, std::size_t n) {
  return n > 1 ? -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
}

struct Bilinear {
  long x0, y0;
  double fx, fy;
  bool any;  // false when no corner can be inside
};

inline Bilinear locate(double px, double py, std::size_t H, std::size_t W) {
  if (!(px >= -1.0 && py >= -1.0 && px < static_cast<double>(W) && py < static_cast<double>(H)))
    return {0, 0, 0.0, 0.0, false};
  const double fx0 = std::floor(px), fy0 = std::floor(py);
  return {static_cast<long>(fx0), static_cast<long>(fy0), px - fx0, py - fy0, true};
}

inline double pixel(const double* img, long y, long x, std::size_t H, std::size_t W) {
  return (x >= 0 && y >= 0 && x < static_cast<long>(W) && y < static_cast<long>(H)) ? img[y * static_cast<long>(W) + x]
                                                                                       : 0.0;
}

inline void splat(double* img, long y, long x, std::size_t H, std::size_t W, double v) {
  if (x >= 0 && y >= 0 && x < static_cast<long>(W) && y < static_cast<long>(H)) img[y * static_cast<long>(W) + x] += v;
}

/// Samples C channels of a [C,H,W] image at pixel coordinate (px, py).
inline void sample_point(const double* img, std::size_t C, std::size_t H, std::size_t W, double px, double py,
                         double* out, std::size_t out_stride) {
  const Bilinear b = locate(px, py, H, W);
  for (std::size_t c = 0; c < C; ++c) {
    if (!b.any) {
      out[c * out_stride] = 0.0;
      continue;
    }
    const double* ch = img + c * H * W;
    const double v00 = pixel(ch, b.y0, b.x0, H, W), v01 = pixel(ch, b.y0, b.x0 + 1, H, W);
    const double v10 = pixel(ch, b.y0 + 1, b.x0, H, W), v11 = pixel(ch, b.y0 + 1, b.x0 + 1, H, W);
    out[c * out_stride] = (1 - b.fy) * ((1 - b.fx) * v00 + b.fx * v01) + b.fy * ((1 - b.fx) * v10 + b.fx * v11);
  }
}

/// Backward of sample_point: scatters into gimg (if non-null) and returns the
/// derivative with respect to the pixel coordinates.
inline std::pair<double, double> sample_point_backward(const double* img, double* gimg, std::size_t C, std::size_t H,
                                                       std::size_t W, double px, double py, const double* gout,
                                                       std::size_t gout_stride) {
  const Bilinear b = locate(px, py, H, W);
  if (!b.any) return {0.0, 0.0};
  double dpx = 0.0, dpy = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    const double g = gout[c * gout_stride];
    if (g == 0.0) continue;
    const double* ch = img + c * H * W;
    const double v00 = pixel(ch, b.y0, b.x0, H, W), v01 = pixel(ch, b.y0, b.x0 + 1, H, W);
    const double v10 = pixel(ch, b.y0 + 1, b.x0, H, W), v11 = pixel(ch, b.y0 + 1, b.x0 + 1, H, W);
    dpx += g * ((1 - b.fy) * (v01 - v00) + b.fy * (v11 - v10));
    dpy += g * ((1 - b.fx) * (v10 - v00) + b.fx * (v11 - v01));
    if (gimg) {
      double* gch = gimg + c * H * W;
      splat(gch, b.y0, b.x0, H, W, g * (1 - b.fx) * (1 - b.fy));
      splat(gch, b.y0, b.x0 + 1, H, W, g * b.fx * (1 - b.fy));
      splat(gch, b.y0 + 1, b.x0, H, W, g * (1 - b.fx) * b.fy);
      splat(gch, b.y0 + 1, b.x0 + 1, H, W, g * b.fx * b.fy);
    }
  }
  return {dpx, dpy};
}

inline double to_pixel(double g, std::size_t n) { return (g + 1.0) * 0.5 * static_cast<double>(n - 1); }

}  // namespace detail

/// Sampling grid for a batch of 2x3 affine matrices: theta [B, 2, 3] ->
/// grid [B, H, W, 2] holding (x, y) normalized source coordinates.
inline Tensor affine_grid(const Tensor& theta, std::size_t out_h, std::size_t out_w) {
  if (theta.rank() != 3 || theta.dim(1) != 2 || theta.dim(2) != 3)
    throw ShapeError("affine_grid: theta must be [B,2,3], got " + shape_str(theta.shape()));
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("affine_grid: output size must be positive");
  const std::size_t B = theta.dim(0);
  std::vector<double> out(B * out_h * out_w * 2);
  for (std::size_t n = 0; n < B; ++n) {
    const double* t = theta.data().data() + n * 6;
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        const double xn = detail::norm_coord(x, out_w), yn = detail::norm_coord(y, out_h);
        double* o = out.data() + ((n * out_h + y) * out_w + x) * 2;
        o[0] = t[0] * xn + t[1] * yn + t[2];
        o[1] = t[3] * xn + t[4] * yn + t[5];
      }
  }
  const bool rec = detail::needs_grad({&theta});
  return detail::make_result(Shape{B, out_h, out_w, 2}, std::move(out), rec, {theta},
                             [theta, B, out_h, out_w](detail::Node& self) {
    auto g = detail::grad_of(theta);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) {
          const double xn = detail::norm_coord(x, out_w), yn = detail::norm_coord(y, out_h);
          const double* go = self.grad.data() + ((n * out_h + y) * out_w + x) * 2;
          double* gt = g.data() + n * 6;
          gt[0] += go[0] * xn;
          gt[1] += go[0] * yn;
          gt[2] += go[0];
          gt[3] += go[1] * xn;
          gt[4] += go[1] * yn;
          gt[5] += go[1];
        }
  });
}

/// Batched bilinear sampling: x [B, C, H, W], grid [B, Ho, Wo, 2] -> [B, C, Ho, Wo].
/// Differentiable with respect to both the source and the grid.
inline Tensor grid_sample(const Tensor& x, const Tensor& grid) {
  detail::require_rank(x, 4, "grid_sample", "input");
  if (grid.rank() != 4 || grid.dim(3) != 2 || grid.dim(0) != x.dim(0))
    throw ShapeError("grid_sample: grid must be [B,Ho,Wo,2] matching input batch, got " + shape_str(grid.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), Ho = grid.dim(1), Wo = grid.dim(2);
  std::vector<double> out(B * C * Ho * Wo);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t p = 0; p < Ho * Wo; ++p) {
      const double* gp = grid.data().data() + (n * Ho * Wo + p) * 2;
      detail::sample_point(x.data().data() + n * C * H * W, C, H, W, detail::to_pixel(gp[0], W),
                           detail::to_pixel(gp[1], H), out.data() + n * C * Ho * Wo + p, Ho * Wo);
    }
  const bool rec = detail::needs_grad({&x, &grid});
  return detail::make_result(Shape{B, C, Ho, Wo}, std::move(out), rec, {x, grid},
                             [x, grid, B, C, H, W, Ho, Wo](detail::Node& self) {
    auto gx = detail::grad_of(x);
    auto gg = detail::grad_of(grid);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t p = 0; p < Ho * Wo; ++p) {
        const double* gp = grid.data().data() + (n * Ho * Wo + p) * 2;
        auto [dpx, dpy] = detail::sample_point_backward(
            x.data().data() + n * C * H * W, gx.empty() ? nullptr : gx.data() + n * C * H * W, C, H, W,
            detail::to_pixel(gp[0], W), detail::to_pixel(gp[1], H), self.grad.data() + n * C * Ho * Wo + p, Ho * Wo);
        if (!gg.empty()) {
          gg[(n * Ho * Wo + p) * 2] += dpx * 0.5 * static_cast<double>(W - 1);
          gg[(n * Ho * Wo + p) * 2 + 1] += dpy * 0.5 * static_cast<double>(H - 1);
        }
      }
  });
}

/// Single-image form: src [C, H, W], grid [Ho, Wo, 2] -> [C, Ho, Wo].
inline Tensor bilinear_sample(const Tensor& src, const Tensor& grid) {
  detail::require_rank(src, 3, "bilinear_sample", "src");
  detail::require_rank(grid, 3, "bilinear_sample", "grid");
  Tensor out = grid_sample(reshape(src, {1, src.dim(0), src.dim(1), src.dim(2)}),
                           reshape(grid, {1, grid.dim(0), grid.dim(1), 2}));
  return reshape(out, {src.dim(0), grid.dim(0), grid.dim(1)});
}

/// Fused affine_grid + grid_sample over many (source, theta) pairs. Output p
/// samples src[src_index[p]] on its own h x w lattice warped by
/// theta[theta_index[p]]. src [S, C, h, w], theta [P_theta, 2, 3].
inline Tensor affine_warp(const Tensor& src, const Tensor& theta,
                          std::shared_ptr<const std::vector<std::size_t>> src_index,
                          std::shared_ptr<const std::vector<std::size_t>> theta_index, Shape out_shape = {}) {
  detail::require_rank(src, 4, "affine_warp", "src");
  if (theta.rank() != 3 || theta.dim(1) != 2 || theta.dim(2) != 3)
    throw ShapeError("affine_warp: theta must be [P,2,3], got " + shape_str(theta.shape()));
  if (src_index->size() != theta_index->size()) throw ShapeError("affine_warp: index lists differ in length");
  const std::size_t P = src_index->size(), C = src.dim(1), H = src.dim(2), W = src.dim(3);
  for (std::size_t p = 0; p < P; ++p)
    if ((*src_index)[p] >= src.dim(0) || (*theta_index)[p] >= theta.dim(0))
      throw std::out_of_range("affine_warp: pair index out of range");
  if (out_shape.empty()) out_shape = {P, C, H, W};
  if (shape_numel(out_shape) != P * C * H * W)
    throw ShapeError("affine_warp: output shape " + shape_str(out_shape) + " does not hold " + std::to_string(P) +
                     " warped patches");
  if (H == 1 && W == 1) {
    // a single pixel always samples itself: the lattice point and its image
    // both sit at pixel 0, whatever theta is
    std::vector<double> out(P * C);
    for (std::size_t p = 0; p < P; ++p)
      std::copy_n(src.data().data() + (*src_index)[p] * C, C, out.data() + p * C);
    const bool rec = detail::needs_grad({&src});
    return detail::make_result(std::move(out_shape), std::move(out), rec, {src}, [src, src_index, C](detail::Node& self) {
      auto gs = detail::grad_of(src);
      for (std::size_t p = 0; p < src_index->size(); ++p)
        for (std::size_t c = 0; c < C; ++c) gs[(*src_index)[p] * C + c] += self.grad[p * C + c];
    });
  }
  std::vector<double> xn(W), yn(H);
  for (std::size_t i = 0; i < W; ++i) xn[i] = detail::norm_coord(i, W);
  for (std::size_t i = 0; i < H; ++i) yn[i] = detail::norm_coord(i, H);
  const std::size_t plane = H * W;
  std::vector<double> out(P * C * plane);
  for (std::size_t p = 0; p < P; ++p) {
    const double* t = theta.data().data() + (*theta_index)[p] * 6;
    const double* img = src.data().data() + (*src_index)[p] * C * plane;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double gx = t[0] * xn[x] + t[1] * yn[y] + t[2];
        const double gy = t[3] * xn[x] + t[4] * yn[y] + t[5];
        detail::sample_point(img, C, H, W, detail::to_pixel(gx, W), detail::to_pixel(gy, H),
                             out.data() + p * C * plane + y * W + x, plane);
      }
  }
  const bool rec = detail::needs_grad({&src, &theta});
  return detail::make_result(
      std::move(out_shape), std::move(out), rec, {src, theta},
      [src, theta, src_index, theta_index, xn, yn, P, C, H, W](detail::Node& self) {
        auto gs = detail::grad_of(src);
        auto gt = detail::grad_of(theta);
        const std::size_t plane = H * W;
        const double sx = 0.5 * static_cast<double>(W - 1), sy = 0.5 * static_cast<double>(H - 1);
        for (std::size_t p = 0; p < P; ++p) {
          const double* t = theta.data().data() + (*theta_index)[p] * 6;
          const std::size_t s = (*src_index)[p];
          const double* img = src.data().data() + s * C * plane;
          double* gimg = gs.empty() ? nullptr : gs.data() + s * C * plane;
          double* gtp = gt.empty() ? nullptr : gt.data() + (*theta_index)[p] * 6;
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
              const double gx = t[0] * xn[x] + t[1] * yn[y] + t[2];
              const double gy = t[3] * xn[x] + t[4] * yn[y] + t[5];
              auto [dpx, dpy] = detail::sample_point_backward(img, gimg, C, H, W, detail::to_pixel(gx, W),
                                                              detail::to_pixel(gy, H),
                                                              self.grad.data() + p * C * plane + y * W + x, plane);
              if (gtp) {
                const double dgx = dpx * sx, dgy = dpy * sy;
                gtp[0] += dgx * xn[x];
                gtp[1] += dgx * yn[y];
                gtp[2] += dgx;
                gtp[3] += dgy * xn[x];
                gtp[4] += dgy * yn[y];
                gtp[5] += dgy;
              }
            }
        }
      });
}

/// Bilinear x2 upsampling with corner alignment: [B, C, H, W] -> [B, C, 2H, 2W].
inline Tensor upsample2x(const Tensor& x) {
  detail::require_rank(x, 4, "upsample2x", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), Ho = 2 * H, Wo = 2 * W;
  auto src_coord = [](std::size_t o, std::size_t n_in, std::size_t n_out) {
    return n_out > 1 ? static_cast<double>(o) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1) : 0.0;
  };
  std::vector<double> out(B * C * Ho * Wo);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* img = x.data().data() + bc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        detail::sample_point(img, 1, H, W, src_coord(ox, W, Wo), src_coord(oy, H, Ho),
                             out.data() + bc * Ho * Wo + oy * Wo + ox, 1);
  }
  const bool rec = detail::needs_grad({&x});
  return detail::make_result(Shape{B, C, Ho, Wo}, std::move(out), rec, {x},
                             [x, B, C, H, W, Ho, Wo, src_coord](detail::Node& self) {
    auto gx = detail::grad_of(x);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const double* img = x.data().data() + bc * H * W;
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox)
          detail::sample_point_backward(img, gx.data() + bc * H * W, 1, H, W, src_coord(ox, W, Wo),
                                        src_coord(oy, H, Ho), self.grad.data() + bc * Ho * Wo + oy * Wo + ox, 1);
    }
  });
}

// ---------------------------------------------------------------- spectral norm

struct SpectralNormResult {
  Tensor weight;
  double sigma = 0.0;
  bool degenerate = false;  // norm below 1e-12; weight returned unchanged
};

namespace detail {

/// Power iteration on the [rows, cols] view of w. u is updated in place.
inline double power_iteration(const Tensor& w, std::vector<double>& u, std::vector<double>& v, int iters) {
  const std::size_t rows = w.dim(0), cols = w.numel() / rows;
  const double* W = w.data().data();
  v.assign(cols, 0.0);
  auto normalize = [](std::vector<double>& a) {
    double n = 0.0;
    for (double x : a) n += x * x;
    n = std::sqrt(n);
    if (n > 0.0)
      for (double& x : a) x /= n;
    return n;
  };
  for (int it = 0; it < iters; ++it) {
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) v[c] += W[r * cols + c] * u[r];
    normalize(v);
    for (std::size_t r = 0; r < rows; ++r) u[r] = dot(W + r * cols, v.data(), cols);
    normalize(u);
  }
  double sigma = 0.0;
  for (std::size_t r = 0; r < rows; ++r) sigma += u[r] * dot(W + r * cols, v.data(), cols);
  return sigma;
}

inline std::vector<double> initial_singular_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> u(n);
  double norm = 0.0;
  for (double& x : u) {
    x = dist(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : u) x /= norm;
  return u;
}

}  // namespace detail

/// Divides w (viewed as [dim0, rest]) by its largest singular value, estimated
/// with `iters` power iterations. Not differentiable; see SpectralNorm.
inline SpectralNormResult spectral_normalize(const Tensor& weight, int iters) {
  if (iters < 1) throw std::invalid_argument("spectral_normalize: iters must be >= 1");
  if (weight.rank() < 2) throw ShapeError("spectral_normalize: weight needs rank >= 2");
  std::vector<double> u = detail::initial_singular_vector(weight.dim(0), 0x5eed), v;
  const double sigma = detail::power_iteration(weight, u, v, iters);
  if (!(std::abs(sigma) >= 1e-12)) return {weight.detach(), sigma, true};
  return {scale(weight.detach(), 1.0 / sigma), sigma, false};
}

/// Stateful spectral normalization for a trainable weight: keeps the left
/// singular vector estimate across calls and differentiates through sigma.
class SpectralNorm {
 public:
  SpectralNorm() = default;
  SpectralNorm(std::size_t rows, std::uint64_t seed) : u_(detail::initial_singular_vector(rows, seed)) {}

  Tensor apply(const Tensor& w, int iters = 1) {
    if (u_.size() != w.dim(0)) u_ = detail::initial_singular_vector(w.dim(0), 0x5eed);
    std::vector<double> v;
    const double sigma = detail::power_iteration(w, u_, v, iters);
    sigma_ = sigma;
    if (!(std::abs(sigma) >= 1e-12)) return w;
    const std::size_t rows = w.dim(0), cols = w.numel() / rows;
    std::vector<double> out(w.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w[i] / sigma;
    const bool rec = detail::needs_grad({&w});
    return detail::make_result(w.shape(), std::move(out), rec, {w},
                               [w, u = u_, v, sigma, rows, cols](detail::Node& self) {
      // d(W/s) with s = u^T W v:  G/s - <G, W/s>/s * u v^T
      auto g = detail::grad_of(w);
      const double inner = detail::dot(self.grad.data(), self.data.data(), self.data.size());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          g[r * cols + c] += (self.grad[r * cols + c] - inner * u[r] * v[c]) / sigma;
    });
  }

  double last_sigma() const { return sigma_; }

 private:
  std::vector<double> u_;
  double sigma_ = 0.0;
};

}  // namespace devit
