#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "neuralfactors/tensor.hpp"

namespace nf::linalg {

// Lower Cholesky of a symmetric positive definite matrix.
// Throws DecompositionError carrying the offending pivot index.
inline Tensor cholesky(const Tensor& a) {
  require(a.rank() == 2 && a.rows() == a.cols(), "cholesky needs a square matrix");
  const std::size_t n = a.rows();
  Tensor l({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      if (i == j) {
        if (!(s > 0.0) || !std::isfinite(s))
          throw DecompositionError("cholesky: matrix not positive definite", i);
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return l;
}

// Solve L x = b (lower) or L^T x = b (trans); b may be a vector or a matrix
// of stacked right-hand-side columns.
inline Tensor trisolve(const Tensor& l, const Tensor& b, bool trans) {
  const std::size_t n = l.rows();
  require(l.rank() == 2 && l.cols() == n, "trisolve needs a square factor");
  require(b.rows() == n, "trisolve rhs row mismatch");
  const std::size_t m = b.rank() == 2 ? b.cols() : 1;
  Tensor x = b;
  auto X = [&](std::size_t i, std::size_t j) -> double& { return x.data()[i * m + j]; };
  if (!trans) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        double s = X(i, j);
        for (std::size_t p = 0; p < i; ++p) s -= l(i, p) * X(p, j);
        X(i, j) = s / l(i, i);
      }
    }
  } else {
    for (std::size_t ii = n; ii-- > 0;) {
      for (std::size_t j = 0; j < m; ++j) {
        double s = X(ii, j);
        for (std::size_t p = ii + 1; p < n; ++p) s -= l(p, ii) * X(p, j);
        X(ii, j) = s / l(ii, ii);
      }
    }
  }
  return x;
}

// (L L^T)^{-1} b
inline Tensor chol_solve(const Tensor& l, const Tensor& b) {
  return trisolve(l, trisolve(l, b, false), true);
}

inline Tensor spd_solve(const Tensor& a, const Tensor& b) { return chol_solve(cholesky(a), b); }

inline double logdet_from_chol(const Tensor& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

struct EigResult {
  Tensor values;   // ascending
  Tensor vectors;  // columns, orthonormal
};

// Cyclic Jacobi for symmetric matrices. Deterministic sweep order, so the
// same input always yields the same rotation sequence bit for bit.
inline EigResult sym_eig(const Tensor& a) {
  require(a.rank() == 2 && a.rows() == a.cols(), "sym_eig needs a square matrix");
  const std::size_t n = a.rows();
  Tensor m = a;
  Tensor v = Tensor::eye(n);
  double frob = 0.0;
  for (double x : a.data()) frob += x * x;
  const double tol = 1e-14 * std::max(1.0, std::sqrt(frob));
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += m(p, q) * m(p, q);
    if (std::sqrt(2.0 * off) < tol) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = m(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (m(q, q) - m(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < n; ++i) {
          const double mip = m(i, p), miq = m(i, q);
          m(i, p) = c * mip - s * miq;
          m(i, q) = s * mip + c * miq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double mpi = m(p, i), mqi = m(q, i);
          m(p, i) = c * mpi - s * mqi;
          m(q, i) = s * mpi + c * mqi;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = v(i, p), viq = v(i, q);
          v(i, p) = c * vip - s * viq;
          v(i, q) = s * vip + c * viq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return m(x, x) < m(y, y); });
  EigResult r{Tensor({n}), Tensor({n, n})};
  for (std::size_t j = 0; j < n; ++j) {
    r.values(order[j]) = 0.0;  // placate initialization order below
  }
  for (std::size_t j = 0; j < n; ++j) {
    r.values(j) = m(order[j], order[j]);
    for (std::size_t i = 0; i < n; ++i) r.vectors(i, j) = v(i, order[j]);
  }
  return r;
}

// Symmetric PSD inverse square root via sym_eig; eigenvalues below the ridge
// are clamped so near-singular forecasts stay usable for whitening.
inline Tensor psd_inverse_sqrt(const Tensor& a, double ridge = 1e-12) {
  const EigResult e = sym_eig(a);
  const std::size_t n = a.rows();
  const double floor_ev = ridge * std::max(1.0, e.values(n - 1));
  Tensor w({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < n; ++p) {
        const double ev = std::max(e.values(p), floor_ev);
        s += e.vectors(i, p) * e.vectors(j, p) / std::sqrt(ev);
      }
      w(i, j) = s;
    }
  return w;
}

inline Tensor spd_inverse(const Tensor& a) {
  const Tensor l = cholesky(a);
  return chol_solve(l, Tensor::eye(a.rows()));
}

// largest eigenvalue; cheap wrapper used for gradient step sizing
inline double max_eigenvalue(const Tensor& a) {
  const EigResult e = sym_eig(a);
  return e.values(a.rows() - 1);
}

}  // namespace nf::linalg
