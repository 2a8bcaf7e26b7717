#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "neuralfactors/common.hpp"

// Scalar special functions. Everything here is branch-predictable and
// allocation-free; the tape calls these per element.

namespace nf::special {

// Lanczos, g = 7, 9 coefficients (Godfrey's tabulation).
// https://my.fit.edu/~gabdo/gamma.txt
inline double lgamma(double x) {
  static const double g7[9] = {
      0.99999999999980993,  676.5203681218851,     -1259.1392167224028,
      771.32342877765313,   -176.61502916214059,   12.507343278686905,
      -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7};
  require(x > 0.0, "lgamma needs x > 0");
  if (x < 0.5) {
    // reflection; only hit by exploratory callers, the model keeps x >= 2
    return std::log(M_PI / std::sin(M_PI * x)) - lgamma(1.0 - x);
  }
  x -= 1.0;
  double a = g7[0];
  const double t = x + 7.5;
  for (int i = 1; i < 9; ++i) a += g7[i] / (x + i);
  return 0.918938533204672742 /* log sqrt(2 pi) */ + (x + 0.5) * std::log(t) - t + std::log(a);
}

// psi(x) by argument shift plus the asymptotic series; ~1e-14 absolute.
inline double digamma(double x) {
  require(x > 0.0, "digamma needs x > 0");
  double r = 0.0;
  while (x < 10.0) {
    r -= 1.0 / x;
    x += 1.0;
  }
  const double f = 1.0 / (x * x);
  return r + std::log(x) - 0.5 / x -
         f * (1.0 / 12 - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f * (1.0 / 132)))));
}

// Regularized incomplete beta I_x(a,b) via the modified Lentz continued
// fraction. 200-iteration cap, 1e-12 relative tolerance.
inline double betacf(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr int max_iter = 200;
  constexpr double eps = 1e-12;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  throw NumericalError("incomplete beta continued fraction did not converge");
}

inline double reg_inc_beta(double a, double b, double x) {
  require(a > 0.0 && b > 0.0, "incomplete beta needs positive parameters");
  require(x >= 0.0 && x <= 1.0, "incomplete beta needs x in [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_front =
      lgamma(a + b) - lgamma(a) - lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  // symmetry keeps the continued fraction in its fast-converging region
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return std::exp(ln_front) * betacf(a, b, x) / a;
  }
  return 1.0 - std::exp(ln_front) * betacf(b, a, 1.0 - x) / b;
}

inline double softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline double softplus_inv(double y) {
  require(y > 0.0, "softplus_inv needs y > 0");
  if (y > 35.0) return y;
  return std::log(std::expm1(y));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double norm_cdf(double z) { return 0.5 * std::erfc(-z * M_SQRT1_2); }

inline double norm_pdf(double z) {
  return 0.398942280401432678 * std::exp(-0.5 * z * z);  // 1/sqrt(2 pi)
}

inline double gelu(double x) { return x * norm_cdf(x); }

inline double gelu_grad(double x) { return norm_cdf(x) + x * norm_pdf(x); }

inline double logmeanexp(const std::vector<double>& v) {
  require(!v.empty(), "logmeanexp of nothing");
  double m = v[0];
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s / static_cast<double>(v.size()));
}

}  // namespace nf::special
