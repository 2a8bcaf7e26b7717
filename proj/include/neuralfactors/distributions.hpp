#pragma once

#include <cmath>

#include "neuralfactors/linalg.hpp"
#include "neuralfactors/rng.hpp"
#include "neuralfactors/special.hpp"
#include "neuralfactors/tensor.hpp"

namespace nf::dist {

// Above this the T density/CDF switch to their Normal limit; keeps the
// lgamma difference well conditioned and makes the Gaussian special case
// exact where tests rely on conjugacy.
constexpr double kNuCap = 1e6;

inline double normal_logpdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return -0.918938533204672742 - std::log(sigma) - 0.5 * z * z;
}

// log p(x | t_nu(mu, sigma)); location-scale Student T
inline double t_logpdf(double x, double mu, double sigma, double nu) {
  require(sigma > 0.0, "t_logpdf needs sigma > 0");
  require(nu > 2.0, "t_logpdf needs nu > 2");
  if (nu >= kNuCap) return normal_logpdf(x, mu, sigma);
  const double u = (x - mu) / sigma;
  return special::lgamma(0.5 * (nu + 1.0)) - special::lgamma(0.5 * nu) -
         0.5 * std::log(M_PI * nu) - std::log(sigma) -
         0.5 * (nu + 1.0) * std::log1p(u * u / nu);
}

inline double t_cdf(double x, double mu, double sigma, double nu) {
  require(sigma > 0.0, "t_cdf needs sigma > 0");
  require(nu > 2.0, "t_cdf needs nu > 2");
  const double u = (x - mu) / sigma;
  if (nu >= kNuCap) return special::norm_cdf(u);
  const double w = nu / (u * u + nu);
  const double half_tail = 0.5 * special::reg_inc_beta(0.5 * nu, 0.5, w);
  return u >= 0.0 ? 1.0 - half_tail : half_tail;
}

inline double t_sample(Rng& rng, double mu, double sigma, double nu) {
  const double z = rng.normal();
  if (nu >= kNuCap) return mu + sigma * z;
  return mu + sigma * z / std::sqrt(rng.chi2(nu) / nu);
}

// Variance of t_nu(mu, sigma): sigma^2 nu/(nu-2); the Normal branch has
// variance sigma^2 exactly.
inline double matched_variance(double sigma, double nu) {
  require(nu > 2.0, "matched_variance needs nu > 2");
  if (nu >= kNuCap) return sigma * sigma;
  return sigma * sigma * nu / (nu - 2.0);
}

// log N(x; mu, Sigma) given the lower Cholesky factor of Sigma
inline double gaussian_logpdf_chol(const Tensor& x, const Tensor& mu, const Tensor& l) {
  const std::size_t d = x.numel();
  require(mu.numel() == d && l.rows() == d, "gaussian_logpdf dimension mismatch");
  Tensor r({d});
  for (std::size_t i = 0; i < d; ++i) r(i) = x(i) - mu(i);
  const Tensor y = linalg::trisolve(l, r, false);
  double quad = 0.0, halflogdet = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    quad += y(i) * y(i);
    halflogdet += std::log(l(i, i));
  }
  return -0.918938533204672742 * static_cast<double>(d) - halflogdet - 0.5 * quad;
}

inline double gaussian_logpdf(const Tensor& x, const Tensor& mu, const Tensor& sigma) {
  return gaussian_logpdf_chol(x, mu, linalg::cholesky(sigma));
}

// ------------------------------------------------------------------
// Hansen (1994) skewed Student T, standardized to zero mean, unit variance.
// lambda in (-1,1) tilts the two tails; eta > 2 is the tail index.

struct SkewT {
  double lambda = 0.0;
  double eta = 8.0;
  double a = 0.0, b = 1.0, c = 0.0;  // derived constants
};

inline SkewT make_skew_t(double lambda, double eta) {
  require(lambda > -1.0 && lambda < 1.0, "skew t needs |lambda| < 1");
  require(eta > 2.0, "skew t needs eta > 2");
  SkewT s;
  s.lambda = lambda;
  s.eta = eta;
  s.c = std::exp(special::lgamma(0.5 * (eta + 1.0)) - special::lgamma(0.5 * eta)) /
        std::sqrt(M_PI * (eta - 2.0));
  s.a = 4.0 * lambda * s.c * (eta - 2.0) / (eta - 1.0);
  s.b = std::sqrt(1.0 + 3.0 * lambda * lambda - s.a * s.a);
  return s;
}

inline double skew_t_logpdf(const SkewT& s, double z) {
  const double branch = (z < -s.a / s.b) ? (1.0 - s.lambda) : (1.0 + s.lambda);
  const double u = (s.b * z + s.a) / branch;
  return std::log(s.b * s.c) - 0.5 * (s.eta + 1.0) * std::log1p(u * u / (s.eta - 2.0));
}

inline double skew_t_cdf(const SkewT& s, double z) {
  const double scale = std::sqrt(s.eta / (s.eta - 2.0));
  if (z < -s.a / s.b) {
    const double u = (s.b * z + s.a) / (1.0 - s.lambda) * scale;
    return (1.0 - s.lambda) * t_cdf(u, 0.0, 1.0, s.eta);
  }
  const double u = (s.b * z + s.a) / (1.0 + s.lambda) * scale;
  return (1.0 - s.lambda) / 2.0 + (1.0 + s.lambda) * (t_cdf(u, 0.0, 1.0, s.eta) - 0.5);
}

// two-piece sampling: the density on each side of the mode -a/b is a
// rescaled half T, so a tail flip with probability (1 +- lambda)/2 plus one
// half-T magnitude reproduces the distribution exactly
inline double skew_t_sample(const SkewT& s, Rng& rng) {
  const double side = rng.uniform();
  const double h = std::abs(t_sample(rng, 0.0, std::sqrt((s.eta - 2.0) / s.eta), s.eta));
  if (side < 0.5 * (1.0 + s.lambda)) return ((1.0 + s.lambda) * h - s.a) / s.b;
  return (-(1.0 - s.lambda) * h - s.a) / s.b;
}

}  // namespace nf::dist
