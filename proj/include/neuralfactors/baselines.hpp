#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "neuralfactors/common.hpp"
#include "neuralfactors/distributions.hpp"
#include "neuralfactors/factor_math.hpp"
#include "neuralfactors/linalg.hpp"
#include "neuralfactors/panel.hpp"
#include "neuralfactors/rng.hpp"
#include "neuralfactors/special.hpp"
#include "neuralfactors/tensor.hpp"

// Classical reference models: rolling probabilistic PCA with Student-T
// idiosyncratic noise, and per-stock GARCH(1,1) with Hansen skewed-T
// innovations. Both expose the same forecast contracts as the neural model.

namespace nf::bl {

namespace detail {

inline double sample_variance(const std::vector<double>& r) {
  const std::size_t n = r.size();
  if (n == 1) return r[0] * r[0];
  double mean = 0.0;
  for (double x : r) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : r) {
    const double d = x - mean;
    ss += d * d;
  }
  return ss / static_cast<double>(n - 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Student-T maximum likelihood on a zero-mean residual series.
// Damped Newton on (sigma, nu) with an analytic gradient and a
// finite-difference Hessian of that gradient.

struct TFit {
  double sigma = 0.0;
  double nu = 0.0;
  double loglik = 0.0;
};

namespace detail {

constexpr double kSigmaFloor = 1e-8;
constexpr double kNuFloor = 4.01;

inline double t_series_nll(const std::vector<double>& e, double sigma, double nu) {
  double acc = 0.0;
  for (double x : e) acc -= dist::t_logpdf(x, 0.0, sigma, nu);
  return acc;
}

inline void t_series_grad(const std::vector<double>& e, double sigma, double nu, double& gs,
                          double& gv) {
  gs = 0.0;
  gv = 0.0;
  if (nu >= dist::kNuCap) {
    for (double x : e) gs += 1.0 / sigma - x * x / (sigma * sigma * sigma);
    return;
  }
  const double hpsi = 0.5 * (special::digamma(0.5 * (nu + 1.0)) - special::digamma(0.5 * nu));
  for (double x : e) {
    const double u2 = x * x / (sigma * sigma);
    gs += 1.0 / sigma - (nu + 1.0) * u2 / (sigma * (nu + u2));
    gv -= hpsi - 0.5 / nu - 0.5 * std::log1p(u2 / nu) +
          0.5 * (nu + 1.0) * u2 / (nu * (nu + u2));
  }
}

}  // namespace detail

inline TFit fit_t_mle(const std::vector<double>& e) {
  require(e.size() >= 2, "t fit needs at least 2 residuals");
  const double n = static_cast<double>(e.size());
  double ms = 0.0;
  for (double x : e) ms += x * x;
  ms /= n;
  if (ms < 1e-14) {
    // numerically exact reconstruction leaves nothing to fit
    const double s = detail::kSigmaFloor;
    return {s, 8.0, -detail::t_series_nll(e, s, 8.0)};
  }

  double nu = 8.0;
  double sigma = std::sqrt(ms * (nu - 2.0) / nu);
  double f = detail::t_series_nll(e, sigma, nu);
  for (std::size_t iter = 0; iter < 200; ++iter) {
    double gs, gv;
    detail::t_series_grad(e, sigma, nu, gs, gv);
    if (std::abs(gs) * sigma + std::abs(gv) * nu < 1e-9 * n) break;

    const double hs = 1e-5 * std::max(1.0, sigma);
    const double hv = 1e-5 * std::max(1.0, nu);
    double a1, b1, a2, b2, c1, d1, c2, d2;
    detail::t_series_grad(e, sigma + hs, nu, a1, b1);
    detail::t_series_grad(e, sigma - hs, nu, a2, b2);
    detail::t_series_grad(e, sigma, nu + hv, c1, d1);
    detail::t_series_grad(e, sigma, nu - hv, c2, d2);
    const double h00 = (a1 - a2) / (2.0 * hs);
    const double h11 = (d1 - d2) / (2.0 * hv);
    const double h01 = 0.5 * ((b1 - b2) / (2.0 * hs) + (c1 - c2) / (2.0 * hv));

    double ds, dv;
    const double det = h00 * h11 - h01 * h01;
    if (h00 > 0.0 && det > 0.0) {
      ds = -(h11 * gs - h01 * gv) / det;
      dv = -(h00 * gv - h01 * gs) / det;
    } else {
      ds = -gs * sigma * sigma / n;
      dv = -gv * nu * nu / n;
    }

    double step = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls) {
      const double sc = std::clamp(sigma + step * ds, detail::kSigmaFloor, 1e8);
      const double vc = std::clamp(nu + step * dv, detail::kNuFloor, dist::kNuCap);
      const double fc = detail::t_series_nll(e, sc, vc);
      if (fc < f) {
        const double dsig = std::abs(sc - sigma);
        const double dnu = std::abs(vc - nu);
        sigma = sc;
        nu = vc;
        f = fc;
        moved = true;
        if (dsig < 1e-10 * std::max(1.0, sigma) && dnu < 1e-10 * std::max(1.0, nu)) moved = false;
        break;
      }
      step *= 0.5;
    }
    if (nu >= dist::kNuCap) {
      sigma = std::sqrt(ms);
      f = detail::t_series_nll(e, sigma, nu);
      break;
    }
    if (!moved) break;
  }
  return {sigma, nu, -f};
}

// ---------------------------------------------------------------------------
// Probabilistic PCA with Student-T idiosyncratics, fitted on a rolling window
// of fully-member stocks.

struct TMarginal {
  double mu = 0.0;
  double sigma = 1.0;
  double nu = 8.0;

  double cdf(double x) const { return dist::t_cdf(x, mu, sigma, nu); }
  double logpdf(double x) const { return dist::t_logpdf(x, mu, sigma, nu); }
};

struct PpcaModel {
  std::size_t f_ppca = 12;
  std::size_t window = 504;
  std::size_t t_end = 0;
  std::vector<std::size_t> stocks;  // panel columns member on every window day
  Tensor mean;                      // (N)
  Tensor loadings;                  // (N, F)
  Tensor idio_sigma;                // (N)
  Tensor idio_nu;                   // (N)
  double sigma2_bar = 0.0;          // mean of the discarded eigenvalues

  std::size_t n() const { return stocks.size(); }

  void validate() const {
    require(mean.numel() == n() && idio_sigma.numel() == n() && idio_nu.numel() == n(),
            "ppca model field sizes disagree");
    require(loadings.rank() == 2 && loadings.dim(0) == n() && loadings.dim(1) == f_ppca,
            "ppca loadings shape mismatch");
    for (std::size_t i = 0; i < n(); ++i) {
      if (!(idio_sigma(i) > 0.0) || !(idio_nu(i) > 4.0))
        throw NumericalError("ppca idiosyncratic parameters out of range");
    }
    for (double v : loadings.data()) require_finite(v, "ppca loadings");
  }

  // Equivalent factor-model view: Gaussian factors via the capped tail.
  fm::FactorParams factor_params() const {
    fm::FactorParams p;
    p.alpha = mean;
    p.b = loadings;
    p.sigma = idio_sigma;
    p.nu = idio_nu;
    p.sigma_z = Tensor::full({f_ppca}, 1.0);
    p.nu_z = Tensor::full({f_ppca}, dist::kNuCap);
    p.matched = true;
    return p;
  }
};

inline PpcaModel ppca_fit(const data::ReturnsPanel& p, std::size_t t_end, std::size_t window = 504,
                          std::size_t f = 12, std::size_t* excluded = nullptr) {
  require(window > f, "ppca window must exceed the factor count");
  require(window >= 2, "ppca window too short");
  require(t_end < p.days(), "ppca window end past the last date");
  require(t_end + 1 >= window, "ppca window starts before the first date");
  const std::size_t t0 = t_end + 1 - window;

  PpcaModel m;
  m.f_ppca = f;
  m.window = window;
  m.t_end = t_end;
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < p.width(); ++i) {
    bool full = true, seen = false;
    for (std::size_t t = t0; t <= t_end; ++t) {
      if (p.is_member(t, i))
        seen = true;
      else
        full = false;
    }
    if (full)
      m.stocks.push_back(i);
    else if (seen)
      ++dropped;
  }
  if (excluded != nullptr) *excluded = dropped;
  require(!m.stocks.empty(), "no stock is a member across the whole ppca window");
  const std::size_t n = m.stocks.size();
  require(f <= n, "ppca factor count exceeds the fitted stock count");

  Tensor x({window, n});
  m.mean = Tensor({n});
  for (std::size_t u = 0; u < window; ++u)
    for (std::size_t i = 0; i < n; ++i) {
      const double v = p.ret(t0 + u, m.stocks[i]);
      x(u, i) = v;
      m.mean(i) += v / static_cast<double>(window);
    }
  for (std::size_t u = 0; u < window; ++u)
    for (std::size_t i = 0; i < n; ++i) x(u, i) -= m.mean(i);

  Tensor s = scale(matmul_tn(x, x), 1.0 / static_cast<double>(window - 1));
  linalg::EigResult eig = linalg::sym_eig(s);

  double disc = 0.0;
  for (std::size_t j = 0; j + f < n; ++j) disc += std::max(eig.values(j), 0.0);
  m.sigma2_bar = (n > f) ? disc / static_cast<double>(n - f) : 0.0;

  m.loadings = Tensor({n, f});
  for (std::size_t j = 0; j < f; ++j) {
    const std::size_t src = n - 1 - j;
    const double scale = std::sqrt(std::max(eig.values(src) - m.sigma2_bar, 0.0));
    for (std::size_t i = 0; i < n; ++i) m.loadings(i, j) = eig.vectors(i, src) * scale;
  }

  // residuals against the posterior-mean factor scores, in the eigenbasis
  Tensor resid = x;
  for (std::size_t j = 0; j < f; ++j) {
    const std::size_t src = n - 1 - j;
    const double lam = eig.values(src);
    if (lam <= 1e-300) continue;
    const double shrink = (lam - m.sigma2_bar) / lam;
    for (std::size_t u = 0; u < window; ++u) {
      double proj = 0.0;
      for (std::size_t i = 0; i < n; ++i) proj += eig.vectors(i, src) * x(u, i);
      proj *= shrink;
      for (std::size_t i = 0; i < n; ++i) resid(u, i) -= eig.vectors(i, src) * proj;
    }
  }

  m.idio_sigma = Tensor({n});
  m.idio_nu = Tensor({n});
  std::vector<double> e(window);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t u = 0; u < window; ++u) e[u] = resid(u, i);
    const TFit fit = fit_t_mle(e);
    m.idio_sigma(i) = fit.sigma;
    m.idio_nu(i) = fit.nu;
  }
  m.validate();
  return m;
}

struct PpcaForecast {
  MomentForecast moments;
  std::vector<TMarginal> marginals;
};

inline PpcaForecast ppca_forecast(const PpcaModel& m) {
  m.validate();
  const std::size_t n = m.n();
  PpcaForecast out;
  out.moments.mean = m.mean;
  out.moments.cov = matmul_nt(m.loadings, m.loadings);
  for (std::size_t i = 0; i < n; ++i)
    out.moments.cov(i, i) += dist::matched_variance(m.idio_sigma(i), m.idio_nu(i));
  out.marginals.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double var = out.moments.cov(i, i);
    const double nu = m.idio_nu(i);
    const double scale = (nu >= dist::kNuCap) ? std::sqrt(var) : std::sqrt(var * (nu - 2.0) / nu);
    out.marginals[i] = {m.mean(i), scale, nu};
  }
  return out;
}

// Refits every `refit_every` days on a trailing window; models are cached per
// refit date so a backtest touches each fit once.
class PpcaRoller {
 public:
  PpcaRoller(const data::ReturnsPanel& p, std::size_t window = 504, std::size_t refit_every = 21,
             std::size_t f = 12)
      : panel_(p), window_(window), refit_every_(refit_every), f_(f) {
    require(refit_every_ >= 1, "refit cadence must be at least 1 day");
  }

  std::size_t first_usable() const { return window_ - 1; }

  const PpcaModel& at(std::size_t t) {
    require(t + 1 >= window_, "date lacks ppca window warm-up");
    require(t < panel_.days(), "date past the end of the panel");
    const std::size_t base = first_usable();
    const std::size_t key = base + ((t - base) / refit_every_) * refit_every_;
    auto it = cache_.find(key);
    if (it == cache_.end())
      it = cache_.emplace(key, ppca_fit(panel_, key, window_, f_)).first;
    return it->second;
  }

 private:
  const data::ReturnsPanel& panel_;
  std::size_t window_;
  std::size_t refit_every_;
  std::size_t f_;
  std::map<std::size_t, PpcaModel> cache_;
};

// ---------------------------------------------------------------------------
// GARCH(1,1) with Hansen skewed-T innovations, one stock at a time.
// r_t = sigma_t eps_t, sigma_t^2 = omega + a r_{t-1}^2 + b sigma_{t-1}^2.

struct GarchModel {
  double omega = 1e-4;
  double a = 0.05;
  double b = 0.90;
  double lambda = 0.0;
  double nu = 8.0;
  double loglik = -std::numeric_limits<double>::infinity();
  double sigma2_last = 0.0;  // conditional variance at the final fitted day
  std::size_t n_obs = 0;

  void validate() const {
    require(omega > 0.0, "garch needs omega > 0");
    require(a >= 0.0 && b >= 0.0, "garch needs a, b >= 0");
    require(a + b < 1.0, "garch needs a + b < 1");
    require(lambda > -1.0 && lambda < 1.0, "garch needs |lambda| < 1");
    require(nu > 4.0, "garch needs nu > 4");
  }
};

class GarchFitError : public NumericalError {
 public:
  GarchFitError(const std::string& msg, GarchModel best_found)
      : NumericalError(msg), best(best_found) {}
  GarchModel best;
};

namespace detail {

struct GarchTheta {
  double omega, a, b, lambda, nu;
};

// negative log-likelihood; sigma_1^2 seeded with the sample variance
inline double garch_nll_theta(const GarchTheta& th, const std::vector<double>& r, double var0,
                              double* sigma2_next = nullptr) {
  const dist::SkewT shape = dist::make_skew_t(th.lambda, th.nu);
  double s2 = var0;
  double nll = 0.0;
  for (double x : r) {
    if (!(s2 > 0.0) || !std::isfinite(s2)) return std::numeric_limits<double>::infinity();
    const double sig = std::sqrt(s2);
    nll -= dist::skew_t_logpdf(shape, x / sig) - std::log(sig);
    s2 = th.omega + th.a * x * x + th.b * s2;
  }
  if (sigma2_next != nullptr) *sigma2_next = s2;
  return nll;
}

constexpr double kPersistCap = 1.0 - 1e-6;
constexpr double kLambdaCap = 1.0 - 1e-10;

inline GarchTheta garch_unpack(const std::vector<double>& u) {
  GarchTheta th;
  th.omega = std::exp(std::clamp(u[0], -60.0, 60.0));
  const double persist = kPersistCap * special::sigmoid(u[1]);
  const double mix = special::sigmoid(u[2]);
  th.a = persist * mix;
  th.b = persist * (1.0 - mix);
  th.lambda = std::clamp(std::tanh(u[3]), -kLambdaCap, kLambdaCap);
  th.nu = 4.0 + special::softplus(u[4]);
  return th;
}

inline double logit(double x) { return std::log(x / (1.0 - x)); }

inline std::vector<double> garch_pack(const GarchTheta& th) {
  const double persist = std::clamp((th.a + th.b) / kPersistCap, 1e-12, 1.0 - 1e-12);
  const double mix = std::clamp(th.a / std::max(th.a + th.b, 1e-300), 1e-12, 1.0 - 1e-12);
  return {std::log(th.omega), logit(persist), logit(mix), std::atanh(th.lambda),
          special::softplus_inv(std::max(th.nu - 4.0, 1e-12))};
}

struct BfgsResult {
  std::vector<double> x;
  double f = std::numeric_limits<double>::infinity();
  double gnorm = std::numeric_limits<double>::infinity();
  bool converged = false;
};

// dense BFGS with numeric central-difference gradients and Armijo backtracking
template <class F>
BfgsResult bfgs_minimize(F&& fn, std::vector<double> x, std::size_t max_iter, double gtol) {
  const std::size_t d = x.size();
  auto grad = [&](const std::vector<double>& v) {
    std::vector<double> g(d);
    std::vector<double> w = v;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(v[i]));
      w[i] = v[i] + h;
      const double fp = fn(w);
      w[i] = v[i] - h;
      const double fm = fn(w);
      w[i] = v[i];
      g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
  };
  auto inf_norm = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double t : v) m = std::max(m, std::abs(t));
    return m;
  };

  std::vector<double> hmat(d * d, 0.0);
  bool h_identity = true;
  auto reset_h = [&]() {
    std::fill(hmat.begin(), hmat.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) hmat[i * d + i] = 1.0;
    h_identity = true;
  };
  reset_h();

  BfgsResult out;
  double f = fn(x);
  if (!std::isfinite(f)) {
    out.x = x;
    out.f = f;
    return out;
  }
  std::vector<double> g = grad(x);
  double drops[3] = {std::numeric_limits<double>::infinity(),
                     std::numeric_limits<double>::infinity(),
                     std::numeric_limits<double>::infinity()};
  std::size_t n_drops = 0;
  // certify a stop either by small gradient or by the last accepted steps no
  // longer moving the objective beyond numeric-differencing noise
  auto stalled_out = [&]() {
    return drops[0] + drops[1] + drops[2] < 3e-9 * (std::abs(f) + 1.0);
  };

  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    out.gnorm = inf_norm(g);
    if (out.gnorm < gtol || stalled_out()) {
      out.converged = true;
      break;
    }

    std::vector<double> p(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) p[i] -= hmat[i * d + j] * g[j];
    double slope = 0.0;
    for (std::size_t i = 0; i < d; ++i) slope += p[i] * g[i];
    if (!(slope < 0.0)) {
      reset_h();
      for (std::size_t i = 0; i < d; ++i) p[i] = -g[i];
      slope = 0.0;
      for (std::size_t i = 0; i < d; ++i) slope += p[i] * g[i];
      if (!(slope < 0.0)) break;
    }

    double step = 1.0;
    std::vector<double> xn(d);
    double fn_new = std::numeric_limits<double>::infinity();
    bool ok = false;
    for (int ls = 0; ls < 50; ++ls) {
      for (std::size_t i = 0; i < d; ++i) xn[i] = x[i] + step * p[i];
      fn_new = fn(xn);
      if (std::isfinite(fn_new) && fn_new <= f + 1e-4 * step * slope) {
        ok = true;
        break;
      }
      step *= 0.5;
    }
    if (!ok) {
      if (!h_identity) {
        reset_h();
        continue;
      }
      // steepest descent cannot improve f at any step size: a minimum at
      // floating point resolution
      out.converged = out.gnorm < 10.0 * gtol || n_drops > 0;
      break;
    }
    drops[n_drops % 3] = f - fn_new;
    ++n_drops;

    std::vector<double> gn = grad(xn);
    std::vector<double> s(d), y(d);
    double sy = 0.0, snorm = 0.0, ynorm = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      s[i] = xn[i] - x[i];
      y[i] = gn[i] - g[i];
      sy += s[i] * y[i];
      snorm += s[i] * s[i];
      ynorm += y[i] * y[i];
    }
    if (sy > 1e-12 * std::sqrt(snorm * ynorm)) {
      const double rho = 1.0 / sy;
      std::vector<double> hy(d, 0.0);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) hy[i] += hmat[i * d + j] * y[j];
      double yhy = 0.0;
      for (std::size_t i = 0; i < d; ++i) yhy += y[i] * hy[i];
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j)
          hmat[i * d + j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
      h_identity = false;
    }
    x = xn;
    f = fn_new;
    g = gn;
  }
  out.x = x;
  out.f = f;
  if (out.gnorm == std::numeric_limits<double>::infinity()) out.gnorm = inf_norm(g);
  return out;
}

}  // namespace detail

inline double garch_nll(const GarchModel& m, const std::vector<double>& r) {
  m.validate();
  require(!r.empty(), "garch likelihood needs observations");
  const detail::GarchTheta th{m.omega, m.a, m.b, m.lambda, m.nu};
  return detail::garch_nll_theta(th, r, detail::sample_variance(r));
}

inline GarchModel garch_fit(const std::vector<double>& r, std::uint64_t seed = 1) {
  require(r.size() >= 250, "garch fit needs at least 250 observations");
  const double var0 = detail::sample_variance(r);
  require(var0 > 0.0, "garch fit needs non-degenerate returns");
  const std::size_t t_len = r.size();

  auto objective = [&](const std::vector<double>& u) {
    return detail::garch_nll_theta(detail::garch_unpack(u), r, var0);
  };
  // restarts explore on a capped prefix, the winner is polished on everything
  const std::vector<double> prefix(r.begin(), r.begin() + std::min<std::size_t>(t_len, 20000));
  const double var0p = detail::sample_variance(prefix);
  auto objective_prefix = [&](const std::vector<double>& u) {
    return detail::garch_nll_theta(detail::garch_unpack(u), prefix, var0p);
  };
  const double gtol = std::max(1e-6, 1e-9 * static_cast<double>(t_len));

  Rng rng = Rng::substream(seed, "garch.restarts");
  std::vector<std::vector<double>> starts;
  starts.push_back(detail::garch_pack({0.05 * var0, 0.05, 0.90, 0.0, 8.0}));
  starts.push_back(detail::garch_pack({0.80 * var0, 0.05, 0.15, 0.0, 8.0}));
  starts.push_back(detail::garch_pack({0.97 * var0, 0.01, 0.02, 0.0, 8.0}));
  for (std::size_t k = starts.size(); k < 20; ++k) {
    detail::GarchTheta th;
    th.omega = var0 * std::exp(-3.0 * rng.uniform());
    th.a = 0.01 + 0.29 * rng.uniform();
    th.b = 0.30 + 0.65 * rng.uniform();
    const double persist = th.a + th.b;
    if (persist > 0.995) {
      th.a *= 0.995 / persist;
      th.b *= 0.995 / persist;
    }
    th.lambda = -0.5 + rng.uniform();
    th.nu = 4.0 + std::exp(2.3 * rng.uniform());
    starts.push_back(detail::garch_pack(th));
  }

  detail::BfgsResult best;
  for (const auto& u0 : starts) {
    detail::BfgsResult res = detail::bfgs_minimize(objective_prefix, u0, 60, gtol);
    if (res.f < best.f) best = res;
  }
  if (best.x.empty()) throw NumericalError("garch fit found no finite starting point");
  best = detail::bfgs_minimize(objective, best.x, 400, gtol);

  // The flat-variance model sits on the a+b boundary of the parameter space,
  // where the likelihood surface is nearly flat along the persistence ray and
  // the argmax is unstable. Fit the constant-variance null (a = b = 0 with
  // omega, lambda, nu free) and keep the dynamic point only when it wins the
  // likelihood ratio test at the 95% level for two restricted parameters.
  auto null_objective = [&](const std::vector<double>& v) {
    return objective({v[0], -30.0, 0.0, v[1], v[2]});
  };
  std::vector<double> null_start = {std::log(var0), 0.0, special::softplus_inv(4.0)};
  detail::BfgsResult null_best = detail::bfgs_minimize(null_objective, null_start, 200, gtol);
  const double lr_cut = 3.0;  // chi^2_2 95% quantile / 2
  const bool keep_dynamic = best.f < null_best.f - lr_cut;

  detail::GarchTheta th;
  bool certified = false;
  double fit_nll = 0.0;
  if (keep_dynamic) {
    th = detail::garch_unpack(best.x);
    certified = best.converged;
    fit_nll = best.f;
  } else {
    th = detail::garch_unpack({null_best.x[0], -30.0, 0.0, null_best.x[1], null_best.x[2]});
    th.a = 0.0;
    th.b = 0.0;
    certified = null_best.converged;
    fit_nll = null_best.f;
  }

  GarchModel m;
  m.omega = th.omega;
  m.a = th.a;
  m.b = th.b;
  m.lambda = th.lambda;
  m.nu = th.nu;
  m.n_obs = t_len;
  m.loglik = -detail::garch_nll_theta(th, r, var0, &m.sigma2_last);
  if (!certified) {
    throw GarchFitError("garch fit did not converge after 20 restarts (best nll " +
                            std::to_string(fit_nll) + ")",
                        m);
  }
  m.validate();
  return m;
}

struct GarchForecast {
  double sigma = 1.0;  // one-step conditional volatility
  dist::SkewT shape;

  double cdf(double x) const { return dist::skew_t_cdf(shape, x / sigma); }
  double logpdf(double x) const { return dist::skew_t_logpdf(shape, x / sigma) - std::log(sigma); }
  double sample(Rng& rng) const { return sigma * dist::skew_t_sample(shape, rng); }
};

inline GarchForecast garch_forecast(const GarchModel& m, const std::vector<double>& history) {
  m.validate();
  require(!history.empty(), "garch forecast needs at least one observation");
  double s2 = 0.0;
  detail::garch_nll_theta({m.omega, m.a, m.b, m.lambda, m.nu}, history,
                          detail::sample_variance(history), &s2);
  GarchForecast f;
  f.sigma = std::sqrt(s2);
  f.shape = dist::make_skew_t(m.lambda, m.nu);
  return f;
}

inline std::vector<double> garch_simulate(const GarchModel& m, std::size_t t_len, Rng& rng,
                                          std::size_t burn = 1000) {
  m.validate();
  const dist::SkewT shape = dist::make_skew_t(m.lambda, m.nu);
  double s2 = m.omega / (1.0 - m.a - m.b);
  std::vector<double> out;
  out.reserve(t_len);
  for (std::size_t t = 0; t < burn + t_len; ++t) {
    const double x = std::sqrt(s2) * dist::skew_t_sample(shape, rng);
    if (t >= burn) out.push_back(x);
    s2 = m.omega + m.a * x * x + m.b * s2;
  }
  return out;
}

}  // namespace nf::bl
