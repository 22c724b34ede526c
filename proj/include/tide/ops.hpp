#pragma once

// Differentiable primitives over tide::Tensor. Every op validates shapes,
// rejects non-finite results, and (when recording) attaches a backward
// closure that accumulates into its inputs' gradients.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "tide/tensor.hpp"

namespace tide {

namespace detail {

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimError(std::string(op) + ": axis out of range");
  return static_cast<std::size_t>(axis);
}

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

// C[m,n] += op(A) * op(B) with op = identity or transpose, row-major.
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* A,
                 const double* B, double* C) {
  if (!ta && !tb) {  // A[m,k] B[k,n]
    for (std::size_t i = 0; i < m; ++i) {
      double* c = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double a = A[i * k + p];
        if (a == 0.0) continue;
        const double* b = B + p * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
      }
    }
  } else if (!ta && tb) {  // A[m,k] B[n,k]
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
    gemm(false, false, m, n, k, A, bt.data(), C);
  } else if (ta && !tb) {  // A[k,m] B[k,n]
    for (std::size_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double a = A[p * m + i];
        if (a == 0.0) continue;
        double* c = C + i * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
      }
    }
  } else {  // A[k,m] B[n,k]
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
    gemm(true, false, m, n, k, A, bt.data(), C);
  }
}

// Smaller operand must be a suffix of the larger one's shape.
inline void check_suffix(const Shape& big, const Shape& small, const char* op) {
  if (small.size() > big.size())
    throw DimError(std::string(op) + ": cannot broadcast " + shape_str(small) + " to " + shape_str(big));
  for (std::size_t i = 0; i < small.size(); ++i)
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i])
      throw DimError(std::string(op) + ": cannot broadcast " + shape_str(small) + " to " + shape_str(big));
}

template <typename F, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const bool a_big = a.size() >= b.size();
  const Shape& out_shape = a_big ? a.shape() : b.shape();
  check_suffix(out_shape, a_big ? b.shape() : a.shape(), op);
  const std::size_t n = numel(out_shape), na = a.size(), nb = b.size();
  std::vector<double> out(n);
  auto A = a.data(), B = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(A[i % na], B[i % nb]);
  return make_result(op, out_shape, std::move(out), {a, b}, [n, na, nb, da, db](Node& self) {
    const auto& A = self.parents[0]->data;
    const auto& B = self.parents[1]->data;
    double* ga = parent_grad(self, 0);
    double* gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double g = self.grad[i];
      if (g == 0.0) continue;
      if (ga) ga[i % na] += g * da(A[i % na], B[i % nb]);
      if (gb) gb[i % nb] += g * db(A[i % na], B[i % nb]);
    }
  });
}

template <typename F, typename D>
Tensor unary(const char* op, const Tensor& x, F f, D d) {
  std::vector<double> out(x.size());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(X[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [d](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& X = self.parents[0]->data;
    for (std::size_t i = 0; i < X.size(); ++i) gx[i] += self.grad[i] * d(X[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

// Ties route the gradient to the first argument.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; }, [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; }, [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(
      "scale", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(
      "add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result("sum", {}, {s}, {x}, [](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const double g = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) gx[i] += g;
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline Tensor sum_axis(const Tensor& x, long axis_in) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank(), "sum_axis");
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  auto X = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t a = 0; a < sp.n; ++a)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += X[(o * sp.n + a) * sp.inner + i];
  return detail::make_result("sum_axis", out_shape, std::move(out), {x}, [sp](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t a = 0; a < sp.n; ++a)
        for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.n + a) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

inline Tensor mean_axis(const Tensor& x, long axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "mean_axis");
  if (x.dim(ax) == 0) throw DimError("mean_axis over empty axis");
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(ax)));
}

// ---------------------------------------------------------------- linear algebra

// Matrix product over the last two axes. Supported ranks: [m,k]x[k,n],
// [B,m,k]x[B,k,n] and [B,m,k]x[k,n]. With transpose_b, b is read as its
// transpose over the last two axes.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3 || b.rank() > a.rank())
    throw DimError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const bool b_batched = b.rank() == 3;
  if (b_batched && b.dim(0) != batch) throw DimError("matmul: batch mismatch");
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t bk = transpose_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
  const std::size_t n = transpose_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  if (bk != k)
    throw DimError("matmul: inner dims disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                   (transpose_b ? "^T" : ""));
  Shape out_shape = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(batch * m * n, 0.0);
  const std::size_t bstride = b_batched ? k * n : 0;
  for (std::size_t t = 0; t < batch; ++t)
    detail::gemm(false, transpose_b, m, n, k, a.data().data() + t * m * k, b.data().data() + t * bstride,
                 out.data() + t * m * n);
  return detail::make_result(
      "matmul", out_shape, std::move(out), {a, b}, [batch, m, n, k, bstride, transpose_b](detail::Node& self) {
        const double* A = self.parents[0]->data.data();
        const double* B = self.parents[1]->data.data();
        double* ga = detail::parent_grad(self, 0);
        double* gb = detail::parent_grad(self, 1);
        for (std::size_t t = 0; t < batch; ++t) {
          const double* G = self.grad.data() + t * m * n;
          // C = A B  : dA = G B^T, dB = A^T G
          // C = A B^T: dA = G B,   dB = G^T A
          if (ga) detail::gemm(false, !transpose_b, m, k, n, G, B + t * bstride, ga + t * m * k);
          if (gb) {
            if (!transpose_b)
              detail::gemm(true, false, k, n, m, A + t * m * k, G, gb + t * bstride);
            else
              detail::gemm(true, false, n, k, m, G, A + t * m * k, gb + t * bstride);
          }
        }
      });
}

// ---------------------------------------------------------------- shape ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

// General axis permutation: out.shape[i] = x.shape[perm[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimError("permute: rank mismatch");
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw DimError("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  // src index for each destination element
  const std::size_t n = x.size();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < r; ++i) s += idx[i] * in_stride[perm[i]];
    src[o] = s;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(n);
  auto X = x.data();
  for (std::size_t o = 0; o < n; ++o) out[o] = X[src[o]];
  return detail::make_result("permute", out_shape, std::move(out), {x}, [src = std::move(src)](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += self.grad[o];
  });
}

// Swap of the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw DimError("transpose needs rank >= 2");
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

inline Tensor concat(const std::vector<Tensor>& xs, long axis_in = 0) {
  if (xs.empty()) throw DimError("concat of zero tensors");
  const std::size_t axis = detail::normalize_axis(axis_in, xs[0].rank(), "concat");
  Shape out_shape = xs[0].shape();
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    if (t.rank() != out_shape.size()) throw DimError("concat: rank mismatch");
    for (std::size_t i = 0; i < t.rank(); ++i)
      if (i != axis && t.dim(i) != out_shape[i]) throw DimError("concat: shape mismatch " + shape_str(t.shape()));
    out_shape[axis] += t.dim(axis);
  }
  const auto sp = detail::split_axis(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t n = t.dim(axis);
    auto X = t.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy(X.begin() + static_cast<long>(o * n * sp.inner), X.begin() + static_cast<long>((o + 1) * n * sp.inner),
                out.begin() + static_cast<long>((o * sp.n + off) * sp.inner));
    off += n;
  }
  return detail::make_result("concat", out_shape, std::move(out), xs, [sp, offsets, axis](detail::Node& self) {
    for (std::size_t t = 0; t < self.parents.size(); ++t) {
      double* g = detail::parent_grad(self, t);
      if (!g) continue;
      const std::size_t n = self.parents[t]->shape[axis];
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < n * sp.inner; ++i)
          g[o * n * sp.inner + i] += self.grad[(o * sp.n + offsets[t]) * sp.inner + i];
    }
  });
}

inline Tensor slice(const Tensor& x, long axis_in, std::size_t start, std::size_t len) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank(), "slice");
  if (start + len > x.dim(axis)) throw DimError("slice out of range on " + shape_str(x.shape()));
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::vector<double> out(numel(out_shape));
  auto X = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < len * sp.inner; ++i) out[o * len * sp.inner + i] = X[(o * sp.n + start) * sp.inner + i];
  return detail::make_result("slice", out_shape, std::move(out), {x}, [sp, start, len](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < len * sp.inner; ++i) gx[(o * sp.n + start) * sp.inner + i] += self.grad[o * len * sp.inner + i];
  });
}

// Gathers rows (axis 0). Indices may repeat.
inline Tensor index_select(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.rank() < 1) throw DimError("index_select on scalar");
  const std::size_t row = x.size() / std::max<std::size_t>(x.dim(0), 1);
  for (auto r : rows)
    if (r >= x.dim(0)) throw DimError("index_select: row " + std::to_string(r) + " out of range");
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * row);
  auto X = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(X.begin() + static_cast<long>(rows[i] * row), row, out.begin() + static_cast<long>(i * row));
  return detail::make_result("index_select", out_shape, std::move(out), {x}, [rows, row](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < row; ++j) gx[rows[i] * row + j] += self.grad[i * row + j];
  });
}

// ---------------------------------------------------------------- normalization

// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, long axis_in = -1) {
  if (x.rank() == 0) throw DimError("softmax of scalar");
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank(), "softmax");
  const auto sp = detail::split_axis(x.shape(), axis);
  if (sp.n == 0) throw DimError("softmax over empty axis");
  std::vector<double> out(x.size());
  auto X = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < sp.n; ++a) mx = std::max(mx, X[base + a * sp.inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < sp.n; ++a) z += (out[base + a * sp.inner] = std::exp(X[base + a * sp.inner] - mx));
      for (std::size_t a = 0; a < sp.n; ++a) out[base + a * sp.inner] /= z;
    }
  return detail::make_result("softmax", x.shape(), std::move(out), {x}, [sp](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const auto& Y = self.data;
    const auto& G = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double dot = 0.0;
        for (std::size_t a = 0; a < sp.n; ++a) dot += G[base + a * sp.inner] * Y[base + a * sp.inner];
        for (std::size_t a = 0; a < sp.n; ++a) {
          const std::size_t j = base + a * sp.inner;
          gx[j] += Y[j] * (G[j] - dot);
        }
      }
  });
}

inline Tensor log_softmax(const Tensor& x, long axis_in = -1) {
  if (x.rank() == 0) throw DimError("log_softmax of scalar");
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank(), "log_softmax");
  const auto sp = detail::split_axis(x.shape(), axis);
  if (sp.n == 0) throw DimError("log_softmax over empty axis");
  std::vector<double> out(x.size());
  auto X = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < sp.n; ++a) mx = std::max(mx, X[base + a * sp.inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < sp.n; ++a) z += std::exp(X[base + a * sp.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t a = 0; a < sp.n; ++a) out[base + a * sp.inner] = X[base + a * sp.inner] - lz;
    }
  return detail::make_result("log_softmax", x.shape(), std::move(out), {x}, [sp](detail::Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const auto& Y = self.data;
    const auto& G = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double gs = 0.0;
        for (std::size_t a = 0; a < sp.n; ++a) gs += G[base + a * sp.inner];
        for (std::size_t a = 0; a < sp.n; ++a) {
          const std::size_t j = base + a * sp.inner;
          gx[j] += G[j] - std::exp(Y[j]) * gs;
        }
      }
  });
}

// Layer normalization over the last axis. A zero-variance row normalizes to
// zeros before the affine step.
inline Tensor layer_norm(const Tensor& x, const std::optional<Tensor>& gain = std::nullopt,
                         const std::optional<Tensor>& bias = std::nullopt, double eps = 1e-5) {
  if (x.rank() == 0) throw DimError("layer_norm of scalar");
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimError("layer_norm over empty last axis");
  if (gain && (gain->size() != d)) throw DimError("layer_norm gain size mismatch");
  if (bias && (bias->size() != d)) throw DimError("layer_norm bias size mismatch");
  const std::size_t rows = x.size() / d;
  std::vector<double> xhat(x.size()), inv_std(rows), out(x.size());
  auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * inv_std[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * (gain ? (*gain)[j] : 1.0) + (bias ? (*bias)[j] : 0.0);
    }
  }
  std::vector<Tensor> inputs{x};
  if (gain) inputs.push_back(*gain);
  if (bias) inputs.push_back(*bias);
  const bool has_gain = gain.has_value(), has_bias = bias.has_value();
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), inputs,
      [d, rows, has_gain, has_bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        double* gx = detail::parent_grad(self, 0);
        double* gg = has_gain ? detail::parent_grad(self, 1) : nullptr;
        double* gb = has_bias ? detail::parent_grad(self, has_gain ? 2 : 1) : nullptr;
        const double* gain_v = has_gain ? self.parents[1]->data.data() : nullptr;
        std::vector<double> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* G = self.grad.data() + r * d;
          const double* H = xhat.data() + r * d;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            if (gg) gg[j] += G[j] * H[j];
            if (gb) gb[j] += G[j];
            dh[j] = G[j] * (gain_v ? gain_v[j] : 1.0);
            m1 += dh[j];
            m2 += dh[j] * H[j];
          }
          if (!gx) continue;
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv_std[r] * (dh[j] - m1 - H[j] * m2);
        }
      });
}

// ---------------------------------------------------------------- sampling

namespace detail {

// Bilinear tap set for a normalized point on an h x w grid whose cell
// centers sit at ((j + 0.5) / w, (i + 0.5) / h). Points are clamped to the
// border; dpx/dpy are the derivatives of the pixel coordinate w.r.t. the
// normalized coordinate (zero where clamping is active).
struct BilinearTaps {
  std::size_t i0, i1, j0, j1;
  double fy, fx;
  double dpx, dpy;
};

inline BilinearTaps bilinear_taps(double x, double y, std::size_t h, std::size_t w) {
  BilinearTaps t{};
  auto axis = [](double u, std::size_t n, std::size_t& lo, std::size_t& hi, double& frac, double& dp) {
    const double top = static_cast<double>(n - 1);
    double p = u * static_cast<double>(n) - 0.5;
    dp = static_cast<double>(n);
    if (u <= 0.0 || u >= 1.0) dp = 0.0;
    if (p <= 0.0) {
      p = 0.0;
      dp = 0.0;
    } else if (p >= top) {
      p = top;
      dp = 0.0;
    }
    const double f = std::floor(p);
    lo = static_cast<std::size_t>(f);
    hi = std::min(lo + 1, n - 1);
    frac = p - f;
  };
  axis(x, w, t.j0, t.j1, t.fx, t.dpx);
  axis(y, h, t.i0, t.i1, t.fy, t.dpy);
  return t;
}

}  // namespace detail

// Samples a [h,w,d] feature map at normalized (x,y) points -> [p,d].
// Differentiable w.r.t. both the map and the point coordinates.
inline Tensor bilinear_sample(const Tensor& featmap, const Tensor& points) {
  if (featmap.rank() != 3) throw DimError("bilinear_sample: featmap must be [h,w,d]");
  const std::size_t h = featmap.dim(0), w = featmap.dim(1), d = featmap.dim(2);
  if (h < 1 || w < 1) throw DimError("bilinear_sample: empty feature map");
  if (points.rank() != 2 || points.dim(1) != 2) throw DimError("bilinear_sample: points must be [p,2]");
  const std::size_t np = points.dim(0);
  std::vector<detail::BilinearTaps> taps(np);
  std::vector<double> out(np * d, 0.0);
  auto F = featmap.data();
  auto P = points.data();
  for (std::size_t p = 0; p < np; ++p) {
    const auto t = taps[p] = detail::bilinear_taps(P[2 * p], P[2 * p + 1], h, w);
    const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx, w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
    const double* v00 = F.data() + (t.i0 * w + t.j0) * d;
    const double* v01 = F.data() + (t.i0 * w + t.j1) * d;
    const double* v10 = F.data() + (t.i1 * w + t.j0) * d;
    const double* v11 = F.data() + (t.i1 * w + t.j1) * d;
    for (std::size_t c = 0; c < d; ++c) out[p * d + c] = w00 * v00[c] + w01 * v01[c] + w10 * v10[c] + w11 * v11[c];
  }
  return detail::make_result(
      "bilinear_sample", {np, d}, std::move(out), {featmap, points},
      [h, w, d, np, taps = std::move(taps)](detail::Node& self) {
        double* gf = detail::parent_grad(self, 0);
        double* gp = detail::parent_grad(self, 1);
        const double* F = self.parents[0]->data.data();
        for (std::size_t p = 0; p < np; ++p) {
          const auto& t = taps[p];
          const double* G = self.grad.data() + p * d;
          const std::size_t k00 = (t.i0 * w + t.j0) * d, k01 = (t.i0 * w + t.j1) * d;
          const std::size_t k10 = (t.i1 * w + t.j0) * d, k11 = (t.i1 * w + t.j1) * d;
          if (gf) {
            const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx, w10 = t.fy * (1 - t.fx),
                         w11 = t.fy * t.fx;
            for (std::size_t c = 0; c < d; ++c) {
              gf[k00 + c] += w00 * G[c];
              gf[k01 + c] += w01 * G[c];
              gf[k10 + c] += w10 * G[c];
              gf[k11 + c] += w11 * G[c];
            }
          }
          if (gp && (t.dpx != 0.0 || t.dpy != 0.0)) {
            double gx = 0.0, gy = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dfx = (1 - t.fy) * (F[k01 + c] - F[k00 + c]) + t.fy * (F[k11 + c] - F[k10 + c]);
              const double dfy = (1 - t.fx) * (F[k10 + c] - F[k00 + c]) + t.fx * (F[k11 + c] - F[k01 + c]);
              gx += G[c] * dfx;
              gy += G[c] * dfy;
            }
            gp[2 * p] += gx * t.dpx;
            gp[2 * p + 1] += gy * t.dpy;
          }
        }
      });
}

struct LevelShape {
  std::size_t h = 0, w = 0;
};

// Multi-scale deformable aggregation.
//   value   [T, d]           tokens of all levels stacked, level-major
//   locs    [Q, H, L, P, 2]  normalized (x,y) sampling points
//   weights [Q, H, L, P]     attention weights
// Head k reads channels [k*d/H, (k+1)*d/H). Output [Q, d].
inline Tensor deformable_aggregate(const Tensor& value, const std::vector<LevelShape>& levels, const Tensor& locs,
                                   const Tensor& weights) {
  if (value.rank() != 2) throw DimError("deformable_aggregate: value must be [T,d]");
  if (locs.rank() != 5 || locs.dim(4) != 2) throw DimError("deformable_aggregate: locs must be [Q,H,L,P,2]");
  const std::size_t Q = locs.dim(0), H = locs.dim(1), L = locs.dim(2), P = locs.dim(3);
  if (weights.shape() != Shape{Q, H, L, P}) throw DimError("deformable_aggregate: weights shape mismatch");
  if (levels.size() != L) throw DimError("deformable_aggregate: level count mismatch");
  const std::size_t d = value.dim(1);
  if (H == 0 || d % H != 0) throw DimError("deformable_aggregate: channels not divisible by heads");
  const std::size_t dh = d / H;
  std::vector<std::size_t> start(L);
  std::size_t total = 0;
  for (std::size_t l = 0; l < L; ++l) {
    if (levels[l].h < 1 || levels[l].w < 1) throw DimError("deformable_aggregate: empty level");
    start[l] = total;
    total += levels[l].h * levels[l].w;
  }
  if (total != value.dim(0)) throw DimError("deformable_aggregate: token count does not match level shapes");

  std::vector<detail::BilinearTaps> taps(Q * H * L * P);
  std::vector<double> out(Q * d, 0.0);
  auto V = value.data();
  auto X = locs.data();
  auto W = weights.data();
  for (std::size_t q = 0; q < Q; ++q)
    for (std::size_t hd = 0; hd < H; ++hd)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t s = ((q * H + hd) * L + l) * P + p;
          const auto t = taps[s] = detail::bilinear_taps(X[2 * s], X[2 * s + 1], levels[l].h, levels[l].w);
          const std::size_t lw = levels[l].w;
          const double a = W[s];
          const double w00 = a * (1 - t.fy) * (1 - t.fx), w01 = a * (1 - t.fy) * t.fx, w10 = a * t.fy * (1 - t.fx),
                       w11 = a * t.fy * t.fx;
          const std::size_t c0 = hd * dh;
          const double* v00 = V.data() + (start[l] + t.i0 * lw + t.j0) * d + c0;
          const double* v01 = V.data() + (start[l] + t.i0 * lw + t.j1) * d + c0;
          const double* v10 = V.data() + (start[l] + t.i1 * lw + t.j0) * d + c0;
          const double* v11 = V.data() + (start[l] + t.i1 * lw + t.j1) * d + c0;
          double* o = out.data() + q * d + c0;
          for (std::size_t c = 0; c < dh; ++c) o[c] += w00 * v00[c] + w01 * v01[c] + w10 * v10[c] + w11 * v11[c];
        }
  return detail::make_result(
      "deformable_aggregate", {Q, d}, std::move(out), {value, locs, weights},
      [=, taps = std::move(taps)](detail::Node& self) {
        double* gv = detail::parent_grad(self, 0);
        double* gx = detail::parent_grad(self, 1);
        double* gw = detail::parent_grad(self, 2);
        const double* V = self.parents[0]->data.data();
        const double* W = self.parents[2]->data.data();
        for (std::size_t q = 0; q < Q; ++q)
          for (std::size_t hd = 0; hd < H; ++hd)
            for (std::size_t l = 0; l < L; ++l)
              for (std::size_t p = 0; p < P; ++p) {
                const std::size_t s = ((q * H + hd) * L + l) * P + p;
                const auto& t = taps[s];
                const std::size_t lw = levels[l].w, c0 = hd * dh;
                const std::size_t k00 = (start[l] + t.i0 * lw + t.j0) * d + c0;
                const std::size_t k01 = (start[l] + t.i0 * lw + t.j1) * d + c0;
                const std::size_t k10 = (start[l] + t.i1 * lw + t.j0) * d + c0;
                const std::size_t k11 = (start[l] + t.i1 * lw + t.j1) * d + c0;
                const double* G = self.grad.data() + q * d + c0;
                const double b00 = (1 - t.fy) * (1 - t.fx), b01 = (1 - t.fy) * t.fx, b10 = t.fy * (1 - t.fx),
                             b11 = t.fy * t.fx;
                const double a = W[s];
                if (gv)
                  for (std::size_t c = 0; c < dh; ++c) {
                    gv[k00 + c] += a * b00 * G[c];
                    gv[k01 + c] += a * b01 * G[c];
                    gv[k10 + c] += a * b10 * G[c];
                    gv[k11 + c] += a * b11 * G[c];
                  }
                if (gw) {
                  double acc = 0.0;
                  for (std::size_t c = 0; c < dh; ++c)
                    acc += G[c] * (b00 * V[k00 + c] + b01 * V[k01 + c] + b10 * V[k10 + c] + b11 * V[k11 + c]);
                  gw[s] += acc;
                }
                if (gx && (t.dpx != 0.0 || t.dpy != 0.0)) {
                  double ax = 0.0, ay = 0.0;
                  for (std::size_t c = 0; c < dh; ++c) {
                    ax += G[c] * ((1 - t.fy) * (V[k01 + c] - V[k00 + c]) + t.fy * (V[k11 + c] - V[k10 + c]));
                    ay += G[c] * ((1 - t.fx) * (V[k10 + c] - V[k00 + c]) + t.fx * (V[k11 + c] - V[k01 + c]));
                  }
                  gx[2 * s] += a * ax * t.dpx;
                  gx[2 * s + 1] += a * ay * t.dpy;
                }
              }
      });
}

// Clamps into [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary(
      "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

}  // namespace tide
