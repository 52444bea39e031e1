#pragma once

// Differentiable primitives over rank-2 tensors. Every op records its own
// backward rule; inputs that do not require gradients are skipped.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "tgk/autodiff.hpp"

namespace tgk::ops {

namespace detail {

inline Tape& same_tape(const Var& a) { return *a.tape(); }
inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ContractError("ops: operands recorded on different tapes");
  return *a.tape();
}
inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}
inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// C += A * B (A: n x k, B: k x m)
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}
// C += A * B^T (A: n x k, B: m x k)
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * m + j] += s;
    }
  }
}
// C += A^T * B (A: k x n, B: k x m)
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * n;
    const double* bp = b + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  Tape& t = same_tape(a);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia, df](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2(A, "matmul");
  detail::require_rank2(B, "matmul");
  if (A.cols() != B.rows()) throw ShapeError("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Tensor C = Tensor::zeros(n, m);
  detail::gemm_acc(A.values().data(), B.values().data(), C.values().data(), n, k, m);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(C), {ia, ib}, [ia, ib, n, k, m](Tape& t, std::size_t self) {
    const Tensor& G = t.grad(self);
    if (t.requires_grad(ia))
      detail::gemm_nt_acc(G.values().data(), t.value(ib).values().data(), t.grad(ia).values().data(), n, m, k);
    if (t.requires_grad(ib))
      detail::gemm_tn_acc(t.value(ia).values().data(), G.values().data(), t.grad(ib).values().data(), k, n, m);
  });
}

inline Var transpose(const Var& a) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  detail::require_rank2(A, "transpose");
  Tensor T = Tensor::zeros(A.cols(), A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) T(j, i) = A(i, j);
  const std::size_t ia = a.id();
  return t.record(std::move(T), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& G = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += G(j, i);
  });
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same(a.value(), b.value(), "add");
  Tensor y = a.value();
  y += b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) += g;
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same(a.value(), b.value(), "sub");
  Tensor y = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same(a.value(), b.value(), "mul");
  Tensor y = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      const Tensor& B = t.value(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      const Tensor& A = t.value(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same(a.value(), b.value(), "div");
  Tensor y = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] /= B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& B = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / B[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      const Tensor& Y = t.value(self);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i] * Y[i] / B[i];
    }
  });
}

// a (R x C) + row (1 x C), broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  Tape& t = detail::same_tape(a, row);
  const Tensor& A = a.value();
  const Tensor& b = row.value();
  if (b.rows() != 1 || b.cols() != A.cols())
    throw ShapeError("add_row: " + shape_str(A.shape()) + " + " + shape_str(b.shape()));
  Tensor y = A;
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) y(i, j) += b[j];
  const std::size_t ia = a.id(), ib = row.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
    }
  });
}

// a (R x C) * row (1 x C), broadcast over rows.
inline Var mul_row(const Var& a, const Var& row) {
  Tape& t = detail::same_tape(a, row);
  const Tensor& A = a.value();
  const Tensor& b = row.value();
  if (b.rows() != 1 || b.cols() != A.cols())
    throw ShapeError("mul_row: " + shape_str(A.shape()) + " * " + shape_str(b.shape()));
  Tensor y = A;
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) y(i, j) *= b[j];
  const std::size_t ia = a.id(), ib = row.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& A = t.value(ia);
    const Tensor& b = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += g(i, j) * b[j];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j) * A(i, j);
    }
  });
}

// a (R x C) * col (R x 1), broadcast over columns.
inline Var mul_col(const Var& a, const Var& col) {
  Tape& t = detail::same_tape(a, col);
  const Tensor& A = a.value();
  const Tensor& c = col.value();
  if (c.cols() != 1 || c.rows() != A.rows())
    throw ShapeError("mul_col: " + shape_str(A.shape()) + " * " + shape_str(c.shape()));
  Tensor y = A;
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) y(i, j) *= c[i];
  const std::size_t ia = a.id(), ic = col.id();
  return t.record(std::move(y), {ia, ic}, [ia, ic](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& A = t.value(ia);
    const Tensor& c = t.value(ic);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += g(i, j) * c[i];
    }
    if (t.requires_grad(ic)) {
      Tensor& gc = t.grad(ic);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gc[i] += g(i, j) * A(i, j);
    }
  });
}

// Rows scaled by fixed (non-differentiable) coefficients.
inline Var scale_rows(const Var& a, std::vector<double> coeff) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  if (coeff.size() != A.rows()) throw ShapeError("scale_rows: coefficient count mismatch");
  Tensor y = A;
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) y(i, j) *= coeff[i];
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia, coeff = std::move(coeff)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += g(i, j) * coeff[i];
  });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}
inline Var add_scalar(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Var relu(const Var& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline Var leaky_relu(const Var& a, double slope) {
  return detail::unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
                       [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}
inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline Var sigmoid(const Var& a) {
  return detail::unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}
inline Var softplus(const Var& a) {
  return detail::unary(a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}
inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Var log(const Var& a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
// x^p for x > 0.
inline Var pow_scalar(const Var& a, double p) {
  return detail::unary(a, [p](double x) { return std::pow(x, p); },
                       [p](double x, double) { return p * std::pow(x, p - 1.0); });
}
// Gradient passes only where lo < x < hi.
inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// Elementwise min/max; ties route the gradient to the first operand.
inline Var minimum(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same(a.value(), b.value(), "minimum");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor y(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) y[i] = A[i] <= B[i] ? A[i] : B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const bool first = A[i] <= B[i];
      if (first && t.requires_grad(ia)) t.grad(ia)[i] += g[i];
      if (!first && t.requires_grad(ib)) t.grad(ib)[i] += g[i];
    }
  });
}
inline Var maximum(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same(a.value(), b.value(), "maximum");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor y(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) y[i] = A[i] >= B[i] ? A[i] : B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(y), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const bool first = A[i] >= B[i];
      if (first && t.requires_grad(ia)) t.grad(ia)[i] += g[i];
      if (!first && t.requires_grad(ib)) t.grad(ib)[i] += g[i];
    }
  });
}

inline Var sum(const Var& a) {
  Tape& t = detail::same_tape(a);
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  const std::size_t ia = a.id();
  return t.record(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / n);
}

// Column sums: (R x C) -> (1 x C).
inline Var sum_rows(const Var& a) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  Tensor y = Tensor::zeros(1, A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) y[j] += A(i, j);
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g[j];
  });
}

inline Var mean_rows(const Var& a) {
  if (a.value().rows() == 0) throw ShapeError("mean_rows: no rows");
  return scale(sum_rows(a), 1.0 / static_cast<double>(a.value().rows()));
}

// Row sums: (R x C) -> (R x 1).
inline Var sum_cols(const Var& a) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  Tensor y = Tensor::zeros(A.rows(), 1);
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) y[i] += A(i, j);
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g[i];
  });
}

// Row-wise softmax restricted to admitted entries (mask[i*C+j] != 0). Excluded
// entries get probability exactly 0. An all-excluded row is a contract error.
inline Var masked_row_softmax(const Var& a, std::vector<std::uint8_t> mask) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  detail::require_rank2(A, "softmax");
  if (!mask.empty() && mask.size() != A.numel()) throw ShapeError("masked_row_softmax: mask size mismatch");
  Tensor y(A.shape());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < A.cols(); ++j)
      if (mask.empty() || mask[i * A.cols() + j]) mx = std::max(mx, A(i, j));
    if (!std::isfinite(mx)) throw ContractError("masked_row_softmax: row admits no entries");
    double z = 0.0;
    for (std::size_t j = 0; j < A.cols(); ++j) {
      const bool on = mask.empty() || mask[i * A.cols() + j];
      y(i, j) = on ? std::exp(A(i, j) - mx) : 0.0;
      z += y(i, j);
    }
    for (std::size_t j = 0; j < A.cols(); ++j) y(i, j) /= z;
  }
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

inline Var row_softmax(const Var& a) { return masked_row_softmax(a, {}); }

inline Var log_softmax(const Var& a) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  detail::require_rank2(A, "log_softmax");
  Tensor y(A.shape());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < A.cols(); ++j) mx = std::max(mx, A(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < A.cols(); ++j) z += std::exp(A(i, j) - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < A.cols(); ++j) y(i, j) = A(i, j) - lz;
  }
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) gs += g(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += g(i, j) - std::exp(y(i, j)) * gs;
    }
  });
}

inline Var gather_rows(const Var& a, std::vector<std::size_t> idx) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  const std::size_t c = A.cols();
  Tensor y = Tensor::zeros(idx.size(), c);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= A.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(A.values().data() + idx[r] * c, c, y.values().data() + r * c);
  }
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    const std::size_t c = g.cols();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) ga(idx[r], j) += g(r, j);
  });
}

// out[b] = sum of rows r with idx[r] == b, for b < buckets.
inline Var scatter_sum_rows(const Var& a, std::vector<std::size_t> idx, std::size_t buckets) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  if (idx.size() != A.rows()) throw ShapeError("scatter_sum_rows: index count mismatch");
  const std::size_t c = A.cols();
  Tensor y = Tensor::zeros(buckets, c);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= buckets) throw ShapeError("scatter_sum_rows: bucket out of range");
    for (std::size_t j = 0; j < c; ++j) y(idx[r], j) += A(r, j);
  }
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    const std::size_t c = g.cols();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) ga(r, j) += g(idx[r], j);
  });
}

// Mean per bucket; an empty bucket yields a zero row.
inline Var scatter_mean_rows(const Var& a, const std::vector<std::size_t>& idx, std::size_t buckets) {
  std::vector<double> count(buckets, 0.0);
  for (auto b : idx)
    if (b < buckets) count[b] += 1.0;
  std::vector<double> inv(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) inv[r] = idx[r] < buckets ? 1.0 / count[idx[r]] : 0.0;
  return scatter_sum_rows(scale_rows(a, std::move(inv)), idx, buckets);
}

// Elementwise max per bucket; gradient routes to the first arg-max row.
// Empty buckets yield zero.
inline Var scatter_max_rows(const Var& a, std::vector<std::size_t> idx, std::size_t buckets) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  if (idx.size() != A.rows()) throw ShapeError("scatter_max_rows: index count mismatch");
  const std::size_t c = A.cols();
  Tensor y = Tensor::zeros(buckets, c);
  constexpr std::size_t none = static_cast<std::size_t>(-1);
  std::vector<std::size_t> arg(buckets * c, none);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= buckets) throw ShapeError("scatter_max_rows: bucket out of range");
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t& s = arg[idx[r] * c + j];
      if (s == none || A(r, j) > y(idx[r], j)) {
        s = r;
        y(idx[r], j) = A(r, j);
      }
    }
  }
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia, arg = std::move(arg), c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t k = 0; k < arg.size(); ++k)
      if (arg[k] != none) ga(arg[k], k % c) += g[k];
  });
}

// Softmax of a column of scores within groups (idx[r] = group of row r).
inline Var segment_softmax(const Var& scores, std::vector<std::size_t> idx, std::size_t groups) {
  Tape& t = detail::same_tape(scores);
  const Tensor& S = scores.value();
  if (S.cols() != 1 || S.rows() != idx.size()) throw ShapeError("segment_softmax: expected E x 1 scores");
  std::vector<double> mx(groups, -std::numeric_limits<double>::infinity()), z(groups, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) mx[idx[r]] = std::max(mx[idx[r]], S[r]);
  Tensor y(S.shape());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    y[r] = std::exp(S[r] - mx[idx[r]]);
    z[idx[r]] += y[r];
  }
  for (std::size_t r = 0; r < idx.size(); ++r) y[r] /= z[idx[r]];
  const std::size_t is = scores.id();
  return t.record(std::move(y), {is}, [is, idx = std::move(idx), groups](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    std::vector<double> dot(groups, 0.0);
    for (std::size_t r = 0; r < idx.size(); ++r) dot[idx[r]] += g[r] * y[r];
    Tensor& gs = t.grad(is);
    for (std::size_t r = 0; r < idx.size(); ++r) gs[r] += y[r] * (g[r] - dot[idx[r]]);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  Tape& t = *parts.front().tape();
  const std::size_t c = parts.front().value().cols();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw ContractError("concat_rows: mixed tapes");
    if (p.value().cols() != c) throw ShapeError("concat_rows: column mismatch");
    offsets.push_back(total);
    total += p.value().rows();
    ids.push_back(p.id());
  }
  Tensor y = Tensor::zeros(total, c);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    std::copy(P.values().begin(), P.values().end(), y.values().begin() + offsets[k] * c);
  }
  auto inputs = ids;
  return t.record(std::move(y), std::move(inputs), [ids, offsets, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor& gk = t.grad(ids[k]);
      for (std::size_t i = 0; i < gk.numel(); ++i) gk[i] += g[offsets[k] * c + i];
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  Tape& t = *parts.front().tape();
  const std::size_t r = parts.front().value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    if (p.value().rows() != r) throw ShapeError("concat_cols: row mismatch");
    offsets.push_back(total);
    total += p.value().cols();
    ids.push_back(p.id());
  }
  Tensor y = Tensor::zeros(r, total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < P.cols(); ++j) y(i, offsets[k] + j) = P(i, j);
  }
  auto inputs = ids;
  return t.record(std::move(y), std::move(inputs), [ids, offsets](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor& gk = t.grad(ids[k]);
      for (std::size_t i = 0; i < gk.rows(); ++i)
        for (std::size_t j = 0; j < gk.cols(); ++j) gk(i, j) += g(i, offsets[k] + j);
    }
  });
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  if (begin > end || end > A.rows()) throw ShapeError("slice_rows: bad range");
  const std::size_t c = A.cols();
  Tensor y({end - begin, c}, std::vector<double>(A.values().begin() + begin * c, A.values().begin() + end * c));
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia, begin, c](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[begin * c + i] += g[i];
  });
}

inline Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  if (begin > end || end > A.cols()) throw ShapeError("slice_cols: bad range");
  Tensor y = Tensor::zeros(A.rows(), end - begin);
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) y(i, j - begin) = A(i, j);
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia, begin](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, begin + j) += g(i, j);
  });
}

// Per-row standardization (no affine part).
inline Var layer_norm_rows(const Var& a, double eps = 1e-5) {
  Tape& t = detail::same_tape(a);
  const Tensor& A = a.value();
  const std::size_t r = A.rows(), c = A.cols();
  Tensor y(A.shape());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += A(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (A(i, j) - mu) * (A(i, j) - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) y(i, j) = (A(i, j) - mu) * inv_std[i];
  }
  const std::size_t ia = a.id();
  return t.record(std::move(y), {ia}, [ia, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    const double n = static_cast<double>(g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double gm = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) {
        gm += g(i, j);
        gy += g(i, j) * y(i, j);
      }
      gm /= n;
      gy /= n;
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += inv_std[i] * (g(i, j) - gm - y(i, j) * gy);
    }
  });
}

// Copy of the value with no gradient path back to the input.
inline Var detach(const Var& a) { return a.tape()->constant(a.value()); }

}  // namespace tgk::ops
