#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "neuralfactors/common.hpp"
#include "neuralfactors/rng.hpp"

namespace nf {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

// Dense row-major f64 tensor. Rank 0 (scalar) through rank 3 is what the
// engine actually uses; shape handling is generic anyway.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    d_.assign(count_(shape_), 0.0);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.d_.begin(), t.d_.end(), v);
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t;
    t.d_.assign(1, v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    Tensor t;
    require(count_(shape) == data.size(), "tensor data size does not match shape " + shape_str(shape));
    t.shape_ = std::move(shape);
    t.d_ = std::move(data);
    return t;
  }

  static Tensor vector(std::vector<double> data) {
    const std::size_t n = data.size();
    return from({n}, std::move(data));
  }

  static Tensor eye(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.d_[i * n + i] = 1.0;
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.d_) v = scale * rng.normal();
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return d_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  bool is_scalar() const { return shape_.empty(); }
  std::size_t rows() const { return rank() >= 1 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() >= 1 ? shape_.back() : 1; }
  // collapse all leading dims; (rows_flat, cols) view used by row-wise ops
  std::size_t rows_flat() const { return cols() ? numel() / cols() : 0; }

  double value() const {
    require(numel() == 1, "value() needs a one-element tensor");
    return d_[0];
  }

  double operator()(std::size_t i) const { return d_[i]; }
  double& operator()(std::size_t i) { return d_[i]; }
  double operator()(std::size_t i, std::size_t j) const { return d_[i * cols() + j]; }
  double& operator()(std::size_t i, std::size_t j) { return d_[i * cols() + j]; }
  double at3(std::size_t b, std::size_t i, std::size_t j) const {
    return d_[(b * shape_[1] + i) * shape_[2] + j];
  }
  double& at3(std::size_t b, std::size_t i, std::size_t j) {
    return d_[(b * shape_[1] + i) * shape_[2] + j];
  }

  const std::vector<double>& data() const { return d_; }
  std::vector<double>& data() { return d_; }

  Tensor reshaped(Shape shape) const {
    require(count_(shape) == numel(),
            "reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : d_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void check_finite(const char* what) const {
    if (!all_finite()) throw NumericalError(std::string("non-finite value in ") + what);
  }

 private:
  static std::size_t count_(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  Shape shape_;
  std::vector<double> d_;
};

// ------------------------------------------------------------------
// broadcast resolution: full-shape match, scalar against anything, or the
// smaller operand's shape equal to a trailing suffix of the larger one.
// Anything else is an explicit reshape away and rejected on purpose.

enum class Bcast { same, b_into_a, a_into_b };

inline bool is_suffix_of(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline Bcast resolve_bcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return Bcast::same;
  if (b.is_scalar() || is_suffix_of(b.shape(), a.shape())) return Bcast::b_into_a;
  if (a.is_scalar() || is_suffix_of(a.shape(), b.shape())) return Bcast::a_into_b;
  throw ContractError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " do not broadcast");
}

// out[i] = f(a[i], b[i mod |b|]) where b repeats as a trailing block
template <class F>
inline Tensor zip_bcast(const Tensor& a, const Tensor& b, F f, const char* op) {
  const Bcast mode = resolve_bcast(a, b, op);
  const Tensor& big = (mode == Bcast::a_into_b) ? b : a;
  const Tensor& small = (mode == Bcast::a_into_b) ? a : b;
  Tensor out(big.shape());
  const std::size_t n = big.numel(), m = std::max<std::size_t>(small.numel(), 1);
  const auto& bd = big.data();
  const auto& sd = small.data();
  auto& od = out.data();
  if (mode == Bcast::a_into_b) {
    for (std::size_t i = 0; i < n; ++i) od[i] = f(sd[i % m], bd[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) od[i] = f(bd[i], sd[i % m]);
  }
  return out;
}

// reduce a full-shape gradient back onto the broadcast operand's shape
inline Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out(target);
  const std::size_t m = std::max<std::size_t>(out.numel(), 1);
  const auto& gd = g.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < gd.size(); ++i) od[i % m] += gd[i];
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return zip_bcast(a, b, [](double x, double y) { return x + y; }, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return zip_bcast(a, b, [](double x, double y) { return x - y; }, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return zip_bcast(a, b, [](double x, double y) { return x * y; }, "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return zip_bcast(a, b, [](double x, double y) { return x / y; }, "div");
}

template <class F>
inline Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  const auto& ad = a.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < ad.size(); ++i) od[i] = f(ad[i]);
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  return map(a, [s](double x) { return x * s; });
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

inline double dot(const Tensor& a, const Tensor& b) {
  require(a.numel() == b.numel(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a(i) * b(i);
  return s;
}

// ------------------------------------------------------------------ matmul
// ikj order keeps the inner loop contiguous on both C and B rows.

inline void matmul_into(Tensor& c, const Tensor& a, const Tensor& b, bool accumulate) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(a.rank() == 2 && b.rank() == 2 && b.rows() == k,
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  if (!accumulate) std::fill(c.data().begin(), c.data().end(), 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* Ai = A + i * k;
    double* Ci = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = Ai[p];
      if (aip == 0.0) continue;
      const double* Bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
    }
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  matmul_into(c, a, b, false);
  return c;
}

// A^T * B without forming the transpose
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  require(a.rank() == 2 && b.rank() == 2 && b.rows() == k, "matmul_tn shape mismatch");
  Tensor c({m, n});
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* Ap = A + p * m;
    const double* Bp = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = Ap[i];
      if (api == 0.0) continue;
      double* Ci = C + i * n;
      for (std::size_t j = 0; j < n; ++j) Ci[j] += api * Bp[j];
    }
  }
  return c;
}

// A * B^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  require(a.rank() == 2 && b.rank() == 2 && b.cols() == k, "matmul_nt shape mismatch");
  Tensor c({m, n});
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* Ai = A + i * k;
    double* Ci = C + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* Bj = B + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += Ai[p] * Bj[p];
      Ci[j] = s;
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose needs rank 2");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// out[q] = a[q]^T b[q] on (B,M,K) x (B,M,N) -> (B,K,N)
inline Tensor bmm_tn(const Tensor& a, const Tensor& b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(1) == b.dim(1),
          "bmm_tn shape mismatch");
  const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor c({nb, k, n});
  for (std::size_t q = 0; q < nb; ++q) {
    const double* A = a.data().data() + q * m * k;
    const double* B = b.data().data() + q * m * n;
    double* C = c.data().data() + q * k * n;
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t i = 0; i < k; ++i) {
        const double api = A[p * k + i];
        if (api == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) C[i * n + j] += api * B[p * n + j];
      }
  }
  return c;
}

// repeat a (..., 1) tensor n times along its last axis
inline Tensor tile_last(const Tensor& a, std::size_t n) {
  require(a.cols() == 1, "tile_last needs a trailing dim of 1");
  Shape s = a.shape();
  s.back() = n;
  Tensor out(std::move(s));
  for (std::size_t r = 0; r < a.numel(); ++r)
    for (std::size_t j = 0; j < n; ++j) out.data()[r * n + j] = a.data()[r];
  return out;
}

// batched matmul on (B,M,K) x (B,K,N); transpose_b reads the second
// operand as (B,N,K). Used by the attention blocks.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0), "bmm needs matching batch dims");
  const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  require(transpose_b ? b.dim(2) == k : b.dim(1) == k, "bmm inner dim mismatch");
  Tensor c({nb, m, n});
  for (std::size_t q = 0; q < nb; ++q) {
    const double* A = a.data().data() + q * m * k;
    const double* B = b.data().data() + q * (transpose_b ? n * k : k * n);
    double* C = c.data().data() + q * m * n;
    if (!transpose_b) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) C[i * n + j] += aip * B[p * n + j];
        }
    } else {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
          C[i * n + j] = s;
        }
    }
  }
  return c;
}

}  // namespace nf
