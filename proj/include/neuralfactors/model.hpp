#pragma once

#include <cmath>
#include <vector>

#include "neuralfactors/embedder.hpp"
#include "neuralfactors/factor_math.hpp"

// The amortized objective: embed a day, build the moment-matched Gaussian
// posterior over factors in closed form, and score k importance-weighted
// draws through the Student-t decoder and prior.
namespace nf::model {

struct PriorVal {
  ad::Val sigma_z;  // (F)
  ad::Val nu_z;     // (F)
};

inline PriorVal prior_on_tape(const Lifted& w) {
  PriorVal p;
  p.sigma_z = ad::softplus(w.get("prior.raw_sigma_z"));
  p.nu_z = ad::shift(ad::softplus(w.get("prior.raw_nu_z")), 4.0);
  return p;
}

inline Tensor prior_sigma_z(const Weights& w) {
  return nf::map(w.get("prior.raw_sigma_z"), [](double v) { return special::softplus(v); });
}

inline Tensor prior_nu_z(const Weights& w) {
  return nf::map(w.get("prior.raw_nu_z"), [](double v) { return 4.0 + special::softplus(v); });
}

namespace detail {

// rows at the dof cap use the exact normal forms; everyone else the t forms
struct NuSplit {
  std::vector<std::size_t> heavy, capped;
};

inline NuSplit split_by_cap(const Tensor& nu) {
  NuSplit s;
  const std::size_t rows = nu.rows();
  const std::size_t inner = rows ? nu.numel() / rows : 0;
  for (std::size_t i = 0; i < rows; ++i)
    (nu.data()[i * inner] >= dist::kNuCap ? s.capped : s.heavy).push_back(i);
  return s;
}

inline ad::Val t_branch_ll(ad::Val x, ad::Val mu, ad::Val sigma, ad::Val nu) {
  using namespace ad;
  Val u = div(sub(x, mu), sigma);
  Val half = scale(shift(nu, 1.0), 0.5);
  Val ll = sub(lgamma(half), lgamma(scale(nu, 0.5)));
  ll = sub(ll, scale(log(scale(nu, M_PI)), 0.5));
  ll = sub(ll, log(sigma));
  return sub(ll, mul(half, log1p(div(square(u), nu))));
}

inline ad::Val normal_branch_ll(ad::Val x, ad::Val mu, ad::Val sigma) {
  using namespace ad;
  Val u = div(sub(x, mu), sigma);
  return shift(neg(add(log(sigma), scale(square(u), 0.5))), -0.918938533204672742);
}

inline ad::Val colsum(ad::Val elems, std::size_t k) {
  return ad::reshape(ad::row_sum(ad::transpose(elems)), {k});
}

}  // namespace detail

// sum_i log density of x(i, j) per draw column j; all inputs (M, k).
// Rows are partitioned by the dof value so the cap is exactly Gaussian.
inline ad::Val t_loglik_colsums(ad::Val x, ad::Val mu, ad::Val sigma, ad::Val nu,
                                std::size_t k) {
  using namespace ad;
  const detail::NuSplit split = detail::split_by_cap(nu.val());
  if (split.capped.empty()) return detail::colsum(detail::t_branch_ll(x, mu, sigma, nu), k);
  if (split.heavy.empty())
    return detail::colsum(detail::normal_branch_ll(x, mu, sigma), k);
  Val heavy = detail::t_branch_ll(take_rows(x, split.heavy), take_rows(mu, split.heavy),
                                  take_rows(sigma, split.heavy), take_rows(nu, split.heavy));
  Val capped = detail::normal_branch_ll(take_rows(x, split.capped),
                                        take_rows(mu, split.capped),
                                        take_rows(sigma, split.capped));
  return add(detail::colsum(heavy, k), detail::colsum(capped, k));
}

// t residual variance sigma^2 nu/(nu-2), falling back to sigma^2 when
// matching is off or the dof sits at the cap; shape-preserving
inline ad::Val variance_on_tape(ad::Val sigma, ad::Val nu, bool matched) {
  using namespace ad;
  Val s2 = square(sigma);
  if (!matched) return s2;
  const detail::NuSplit split = detail::split_by_cap(nu.val());
  if (split.heavy.empty()) return s2;
  Val heavy = mul(take_rows(s2, split.heavy),
                  div(take_rows(nu, split.heavy), shift(take_rows(nu, split.heavy), -2.0)));
  if (split.capped.empty()) return heavy;
  std::vector<ad::Val> parts{heavy, take_rows(s2, split.capped)};
  std::vector<std::size_t> back(split.heavy.size() + split.capped.size());
  for (std::size_t i = 0; i < split.heavy.size(); ++i) back[split.heavy[i]] = i;
  for (std::size_t i = 0; i < split.capped.size(); ++i)
    back[split.capped[i]] = split.heavy.size() + i;
  return take_rows(concat_rows(parts), back);
}

struct PosteriorVal {
  ad::Val lp;    // (F, F) lower Cholesky of the posterior precision
  ad::Val mean;  // (F, 1)
};

// closed-form Gaussian posterior from the variance-matched linear model
inline PosteriorVal posterior_on_tape(ad::Tape& tape, ad::Val b, ad::Val var_x,
                                      ad::Val var_z, ad::Val resid) {
  using namespace ad;
  const std::size_t f = b.val().cols();
  Val d = div(tape.constant(1.0), var_x);
  Val bd = mul(b, broadcast_last(d, f));
  Val prec = add(matmul(transpose(bd), b), diag_embed(reshape(div(tape.constant(1.0), var_z), {f})));
  PosteriorVal out;
  out.lp = cholesky(prec);
  Val rhs = matmul(transpose(bd), resid);
  out.mean = trisolve(out.lp, trisolve(out.lp, rhs, false), true);
  return out;
}

// k-draw importance-weighted NLL of one day's returns under the lifted
// parameters; the posterior draws consume rng in the same order as the
// plain-tensor estimator so the two paths are directly comparable
inline ad::Val ciwae_core(ad::Tape& tape, const DayParamsVal& p, ad::Val sigma_z,
                          ad::Val nu_z, const Tensor& r_next, std::size_t k, Rng& rng,
                          bool matched = true) {
  using namespace ad;
  const std::size_t n = p.alpha.val().rows(), f = p.b.val().cols();
  require(k >= 1, "need at least one draw");
  require(r_next.numel() == n, "returns length must match the cross-section");
  const Tensor r_col = r_next.reshaped({n, 1});
  Val r = tape.constant(r_col);

  Val sz = reshape(sigma_z, {f, 1});
  Val nz = reshape(nu_z, {f, 1});
  Val var_x = variance_on_tape(p.sigma, p.nu, matched);
  Val var_z = variance_on_tape(sz, nz, matched);
  PosteriorVal post = posterior_on_tape(tape, p.b, var_x, var_z, sub(r, p.alpha));

  Tensor eps({f, k});
  Tensor const_q({k});
  const double base = -0.5 * static_cast<double>(f) * std::log(2.0 * M_PI);
  for (std::size_t j = 0; j < k; ++j) {
    double sq = 0.0;
    for (std::size_t q = 0; q < f; ++q) {
      const double e = rng.normal();
      eps(q, j) = e;
      sq += e * e;
    }
    const_q(j) = base - 0.5 * sq;
  }
  Val z = add(broadcast_last(post.mean, k), trisolve(post.lp, tape.constant(eps), true));
  Val log_q = add(tape.constant(const_q), sum(log(diag_part(post.lp))));

  Val mu = add(broadcast_last(p.alpha, k), matmul(p.b, z));
  Val ll_dec = t_loglik_colsums(tape.constant(tile_last(r_col, k)), mu,
                                broadcast_last(p.sigma, k), broadcast_last(p.nu, k), k);
  Val ll_pri = t_loglik_colsums(z, tape.constant(Tensor({f, k})), broadcast_last(sz, k),
                                broadcast_last(nz, k), k);
  Val w = sub(add(ll_dec, ll_pri), log_q);
  return scale(logmeanexp(w), -1.0 / static_cast<double>(n));
}

inline ad::Val ciwae_loss(ad::Tape& tape, const Lifted& w, const ModelConfig& cfg,
                          const data::DayWindows& windows, const Tensor& r_next,
                          const DropoutMasks& drop, Rng& rng) {
  DayParamsVal p = embed_day(tape, w, cfg, windows, drop);
  PriorVal prior = prior_on_tape(w);
  return ciwae_core(tape, p, prior.sigma_z, prior.nu_z, r_next, cfg.k_iwae, rng, cfg.matched);
}

inline fm::FactorParams day_factor_params(const Weights& w, const ModelConfig& cfg,
                                          const data::DayWindows& windows) {
  DayParams d = embed_day_eval(w, cfg, windows);
  fm::FactorParams p;
  p.alpha = d.alpha;
  p.b = d.b;
  p.sigma = d.sigma;
  p.nu = d.nu;
  p.sigma_z = prior_sigma_z(w);
  p.nu_z = prior_nu_z(w);
  p.matched = cfg.matched;
  p.validate();
  return p;
}

inline MomentForecast forecast_day(const Weights& w, const ModelConfig& cfg,
                                   const data::DayWindows& windows) {
  return fm::moments(day_factor_params(w, cfg, windows));
}

inline Tensor sample_day(const Weights& w, const ModelConfig& cfg,
                         const data::DayWindows& windows, std::size_t n_samples, Rng& rng) {
  return fm::sample_returns(day_factor_params(w, cfg, windows), n_samples, rng);
}

struct DayNll {
  double joint = 0.0;
  double independent = 0.0;
};

inline DayNll nll_metrics_day(const fm::FactorParams& p, const Tensor& r, Rng& rng,
                              std::size_t joint_draws = 100,
                              std::size_t indep_draws = 10000) {
  DayNll out;
  out.joint = fm::iwae_nll(p, r, joint_draws, rng);
  out.independent = fm::independent_nll(p, r, indep_draws, rng);
  return out;
}

}  // namespace nf::model
