#pragma once

#include <cstddef>
#include <vector>

#include "neuralfactors/distributions.hpp"
#include "neuralfactors/linalg.hpp"
#include "neuralfactors/rng.hpp"
#include "neuralfactors/tensor.hpp"

namespace nf {

struct MomentForecast {
  Tensor mean;  // (N)
  Tensor cov;   // (N, N)
};

}  // namespace nf

// Tape-free linear factor model math shared by the synthetic-truth oracles,
// trained-model evaluation, and the PPCA baseline. A model here is one day's
// cross-section: r_i = alpha_i + b_i . z + sigma_i eps_i with T noise and a
// product Student T prior on z (nu at the cap means exactly Gaussian).
namespace nf::fm {

struct FactorParams {
  Tensor alpha;    // (N)
  Tensor b;        // (N, F)
  Tensor sigma;    // (N)
  Tensor nu;       // (N)
  Tensor sigma_z;  // (F)
  Tensor nu_z;     // (F)
  // matched: Sigma_x, Sigma_z entries are the moment-matched T variances
  // sigma^2 nu/(nu-2); false uses raw sigma^2 for comparison runs
  bool matched = true;

  std::size_t n() const { return alpha.numel(); }
  std::size_t f() const { return sigma_z.numel(); }

  void validate() const {
    require(b.rank() == 2 && b.rows() == n() && b.cols() == f(), "B must be N x F");
    require(sigma.numel() == n() && nu.numel() == n(), "per-stock vectors must share N");
    require(nu_z.numel() == f(), "per-factor vectors must share F");
    for (std::size_t i = 0; i < n(); ++i)
      require(sigma(i) > 0.0 && nu(i) > 4.0, "need sigma > 0 and nu > 4 per stock");
    for (std::size_t q = 0; q < f(); ++q)
      require(sigma_z(q) > 0.0 && nu_z(q) > 4.0, "need sigma_z > 0 and nu_z > 4 per factor");
  }

  FactorParams subset(const std::vector<std::size_t>& rows) const {
    FactorParams out;
    out.alpha = Tensor({rows.size()});
    out.b = Tensor({rows.size(), f()});
    out.sigma = Tensor({rows.size()});
    out.nu = Tensor({rows.size()});
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const std::size_t i = rows[k];
      out.alpha(k) = alpha(i);
      out.sigma(k) = sigma(i);
      out.nu(k) = nu(i);
      for (std::size_t q = 0; q < f(); ++q) out.b(k, q) = b(i, q);
    }
    out.sigma_z = sigma_z;
    out.nu_z = nu_z;
    out.matched = matched;
    return out;
  }

  bool b_is_zero() const {
    for (double v : b.data())
      if (v != 0.0) return false;
    return true;
  }
};

inline Tensor variance_vector(const Tensor& sigma, const Tensor& nu, bool matched) {
  Tensor v({sigma.numel()});
  for (std::size_t i = 0; i < sigma.numel(); ++i)
    v(i) = matched ? dist::matched_variance(sigma(i), nu(i)) : sigma(i) * sigma(i);
  return v;
}

// Moment-matched Gaussian posterior over z given a day's returns, kept as
// the Cholesky factor of the precision P = Sigma_z^-1 + B^T Sigma_x^-1 B.
struct PosteriorChol {
  Tensor lp;    // (F, F) lower, P = lp lp^T
  Tensor mean;  // (F)

  Tensor covariance() const {
    const std::size_t F = mean.numel();
    Tensor eye = Tensor::eye(F);
    Tensor y = linalg::trisolve(lp, eye, false);
    return matmul_tn(y, y);  // P^-1 = lp^-T lp^-1
  }
};

inline PosteriorChol posterior_chol(const FactorParams& p, const Tensor& r) {
  const std::size_t N = p.n(), F = p.f();
  require(r.numel() == N, "returns length must match the cross-section");
  const Tensor varx = variance_vector(p.sigma, p.nu, p.matched);
  const Tensor varz = variance_vector(p.sigma_z, p.nu_z, p.matched);
  Tensor prec({F, F});
  Tensor rhs({F});
  for (std::size_t i = 0; i < N; ++i) {
    const double wi = 1.0 / varx(i);
    const double resid = r(i) - p.alpha(i);
    for (std::size_t a = 0; a < F; ++a) {
      const double ba = p.b(i, a);
      if (ba == 0.0) continue;
      rhs(a) += ba * wi * resid;
      for (std::size_t c = 0; c <= a; ++c) prec(a, c) += ba * wi * p.b(i, c);
    }
  }
  for (std::size_t a = 0; a < F; ++a) {
    prec(a, a) += 1.0 / varz(a);
    for (std::size_t c = a + 1; c < F; ++c) prec(a, c) = prec(c, a);
  }
  PosteriorChol out;
  out.lp = linalg::cholesky(prec);
  out.mean = linalg::chol_solve(out.lp, rhs);
  return out;
}

inline MomentForecast moments(const FactorParams& p) {
  const std::size_t N = p.n(), F = p.f();
  const Tensor varx = variance_vector(p.sigma, p.nu, p.matched);
  const Tensor varz = variance_vector(p.sigma_z, p.nu_z, p.matched);
  MomentForecast out;
  out.mean = p.alpha;
  out.cov = Tensor({N, N});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < F; ++q) s += p.b(i, q) * varz(q) * p.b(j, q);
      out.cov(i, j) = s;
      out.cov(j, i) = s;
    }
  for (std::size_t i = 0; i < N; ++i) out.cov(i, i) += varx(i);
  return out;
}

inline double decoder_loglik(const FactorParams& p, const Tensor& r, const Tensor& z) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.n(); ++i) {
    double loc = p.alpha(i);
    for (std::size_t q = 0; q < p.f(); ++q) loc += p.b(i, q) * z(q);
    s += dist::t_logpdf(r(i), loc, p.sigma(i), p.nu(i));
  }
  return s;
}

inline double prior_loglik(const FactorParams& p, const Tensor& z) {
  double s = 0.0;
  for (std::size_t q = 0; q < p.f(); ++q)
    s += dist::t_logpdf(z(q), 0.0, p.sigma_z(q), p.nu_z(q));
  return s;
}

inline Tensor sample_prior(const FactorParams& p, Rng& rng) {
  Tensor z({p.f()});
  for (std::size_t q = 0; q < p.f(); ++q) z(q) = dist::t_sample(rng, 0.0, p.sigma_z(q), p.nu_z(q));
  return z;
}

// (n_samples, N) decoder draws; z is drawn fresh per sample
inline Tensor sample_returns(const FactorParams& p, std::size_t n_samples, Rng& rng) {
  Tensor out({n_samples, p.n()});
  for (std::size_t s = 0; s < n_samples; ++s) {
    const Tensor z = sample_prior(p, rng);
    for (std::size_t i = 0; i < p.n(); ++i) {
      double loc = p.alpha(i);
      for (std::size_t q = 0; q < p.f(); ++q) loc += p.b(i, q) * z(q);
      out(s, i) = dist::t_sample(rng, loc, p.sigma(i), p.nu(i));
    }
  }
  return out;
}

// Joint NLL per stock: importance sampling with the moment-matched Gaussian
// posterior as proposal. An all-zero B factorizes the joint exactly, no
// integral involved.
inline double iwae_nll(const FactorParams& p, const Tensor& r, std::size_t k, Rng& rng) {
  require(k >= 1, "need at least one draw");
  const std::size_t N = p.n(), F = p.f();
  if (p.b_is_zero()) {
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i)
      s += dist::t_logpdf(r(i), p.alpha(i), p.sigma(i), p.nu(i));
    return -s / static_cast<double>(N);
  }
  const PosteriorChol post = posterior_chol(p, r);
  double logdet_lp = 0.0;
  for (std::size_t q = 0; q < F; ++q) logdet_lp += std::log(post.lp(q, q));
  std::vector<double> w(k);
  Tensor eps({F});
  for (std::size_t j = 0; j < k; ++j) {
    double sq = 0.0;
    for (std::size_t q = 0; q < F; ++q) {
      eps(q) = rng.normal();
      sq += eps(q) * eps(q);
    }
    // z = mean + Lp^-T eps gives a draw from N(mean, P^-1)
    Tensor z = linalg::trisolve(post.lp, eps, true);
    for (std::size_t q = 0; q < F; ++q) z(q) += post.mean(q);
    const double log_q =
        -0.5 * static_cast<double>(F) * std::log(2.0 * M_PI) + logdet_lp - 0.5 * sq;
    w[j] = decoder_loglik(p, r, z) + prior_loglik(p, z) - log_q;
  }
  return -special::logmeanexp(w) / static_cast<double>(N);
}

// Factorized NLL per stock: each stock's marginal density estimated by
// averaging its decoder density over draws from the prior, with the draw set
// shared across stocks.
inline double independent_nll(const FactorParams& p, const Tensor& r, std::size_t k, Rng& rng) {
  require(k >= 1, "need at least one draw");
  const std::size_t N = p.n();
  std::vector<Tensor> zs;
  zs.reserve(k);
  for (std::size_t j = 0; j < k; ++j) zs.push_back(sample_prior(p, rng));
  double total = 0.0;
  std::vector<double> terms(k);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double loc = p.alpha(i);
      for (std::size_t q = 0; q < p.f(); ++q) loc += p.b(i, q) * zs[j](q);
      terms[j] = dist::t_logpdf(r(i), loc, p.sigma(i), p.nu(i));
    }
    total += special::logmeanexp(terms);
  }
  return -total / static_cast<double>(N);
}

// Exact joint NLL per stock for the Gaussian-limit configuration
inline double gaussian_joint_nll(const FactorParams& p, const Tensor& r) {
  const MomentForecast m = moments(p);
  return -dist::gaussian_logpdf(r, m.mean, m.cov) / static_cast<double>(p.n());
}

}  // namespace nf::fm
