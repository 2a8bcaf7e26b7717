#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "neuralfactors/distributions.hpp"
#include "neuralfactors/factor_math.hpp"
#include "neuralfactors/linalg.hpp"
#include "neuralfactors/panel.hpp"
#include "neuralfactors/rng.hpp"
#include "neuralfactors/tensor.hpp"

namespace nf::ev {

// ---------------------------------------------------------------------------
// VaR calibration

struct CalibrationReport {
  std::size_t m = 0;
  std::vector<double> p;      // quantile grid j/(m+1)
  std::vector<double> p_hat;  // fraction of PIT values strictly below each p_j
  double cal = 0.0;           // sum of squared gaps
};

inline CalibrationReport calibration_error(const std::vector<double>& u, std::size_t m = 100) {
  require(!u.empty(), "calibration needs at least one observation");
  require(m >= 1, "quantile count must be positive");
  for (double v : u)
    require(std::isfinite(v) && v >= 0.0 && v <= 1.0, "model CDF values must lie in [0, 1]");
  std::vector<double> sorted = u;
  std::sort(sorted.begin(), sorted.end());
  CalibrationReport rep;
  rep.m = m;
  rep.p.resize(m);
  rep.p_hat.resize(m);
  const double n = static_cast<double>(u.size());
  for (std::size_t j = 0; j < m; ++j) {
    const double pj = static_cast<double>(j + 1) / static_cast<double>(m + 1);
    const auto it = std::lower_bound(sorted.begin(), sorted.end(), pj);
    const double ph = static_cast<double>(it - sorted.begin()) / n;
    rep.p[j] = pj;
    rep.p_hat[j] = ph;
    rep.cal += (pj - ph) * (pj - ph);
  }
  return rep;
}

// One evaluation day's predictive cross-section: a marginal CDF per stock for
// the PIT pass and a joint sampler for the portfolio pass. Rows align with
// the stocks vector, which holds panel column ids.
struct DayMarginals {
  std::vector<std::size_t> stocks;
  std::vector<std::function<double(double)>> cdf;
  std::function<Tensor(std::size_t, Rng&)> sample;  // (n_draws, stocks.size())
};

using DayMarginalsFn = std::function<DayMarginals(std::size_t)>;

struct UniverseCal {
  double universe = 0.0;   // cal of the day-weighted universe curve
  double portfolio = 0.0;  // cal of the equal-weight portfolio PIT series
  std::size_t member_days = 0;
  CalibrationReport universe_report;
  CalibrationReport portfolio_report;
  std::vector<std::pair<std::size_t, double>> stock_cal;  // per-stock breakdown
};

// Universe calibration averages the per-stock empirical quantile curves with
// weights equal to member-day counts, which is the calibration of the pooled
// PIT sample. The portfolio pass scores the equal-weight portfolio against
// the empirical CDF of sampled portfolio returns, one PIT value per day.
inline UniverseCal universe_calibration(const data::ReturnsPanel& panel,
                                        const std::vector<std::size_t>& dates,
                                        const DayMarginalsFn& day_marginals, Rng& rng,
                                        std::size_t portfolio_samples = 10000) {
  require(!dates.empty(), "need at least one evaluation date");
  require(portfolio_samples >= 1, "need at least one joint sample");
  std::map<std::size_t, std::vector<double>> stock_u;
  std::vector<double> port_u;
  port_u.reserve(dates.size());
  for (std::size_t t : dates) {
    require(t < panel.days(), "evaluation date out of range");
    const DayMarginals dm = day_marginals(t);
    const std::size_t m = dm.stocks.size();
    require(m >= 1, "evaluation day has no stocks");
    require(dm.cdf.size() == m, "one marginal CDF per stock");
    double realized_sum = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      const double r = panel.ret(t, dm.stocks[k]);
      stock_u[dm.stocks[k]].push_back(dm.cdf[k](r));
      realized_sum += r;
    }
    const double realized = realized_sum / static_cast<double>(m);
    const Tensor draws = dm.sample(portfolio_samples, rng);
    require(draws.rank() == 2 && draws.rows() == portfolio_samples && draws.cols() == m,
            "joint sampler must return (n_draws, stocks) draws");
    std::size_t below = 0;
    for (std::size_t s = 0; s < portfolio_samples; ++s) {
      double acc = 0.0;
      for (std::size_t k = 0; k < m; ++k) acc += draws(s, k);
      if (acc / static_cast<double>(m) <= realized) ++below;
    }
    port_u.push_back(static_cast<double>(below) / static_cast<double>(portfolio_samples));
  }
  UniverseCal out;
  std::vector<double> pooled;
  for (const auto& [stock, us] : stock_u) {
    out.stock_cal.emplace_back(stock, calibration_error(us).cal);
    out.member_days += us.size();
    pooled.insert(pooled.end(), us.begin(), us.end());
  }
  out.universe_report = calibration_error(pooled);
  out.universe = out.universe_report.cal;
  out.portfolio_report = calibration_error(port_u);
  out.portfolio = out.portfolio_report.cal;
  return out;
}

// Marginal CDFs for a linear factor day. Rows with all-zero loadings have an
// exact T marginal; loaded rows average the conditional T CDF over a set of
// prior draws shared across stocks and evaluation points.
inline DayMarginals factor_day_marginals(const fm::FactorParams& params,
                                         std::vector<std::size_t> stocks, Rng& rng,
                                         std::size_t cdf_draws = 2048) {
  require(cdf_draws >= 1, "need at least one prior draw");
  require(stocks.size() == params.n(), "stock ids must align with the cross-section");
  auto p = std::make_shared<fm::FactorParams>(params);
  auto zs = std::make_shared<std::vector<Tensor>>();
  if (!p->b_is_zero()) {
    zs->reserve(cdf_draws);
    for (std::size_t k = 0; k < cdf_draws; ++k) zs->push_back(fm::sample_prior(*p, rng));
  }
  DayMarginals dm;
  dm.stocks = std::move(stocks);
  dm.cdf.reserve(p->n());
  for (std::size_t i = 0; i < p->n(); ++i) {
    bool loaded = false;
    for (std::size_t q = 0; q < p->f(); ++q)
      if (p->b(i, q) != 0.0) {
        loaded = true;
        break;
      }
    if (!loaded) {
      dm.cdf.push_back(
          [p, i](double r) { return dist::t_cdf(r, p->alpha(i), p->sigma(i), p->nu(i)); });
    } else {
      dm.cdf.push_back([p, zs, i](double r) {
        double acc = 0.0;
        for (const Tensor& z : *zs) {
          double loc = p->alpha(i);
          for (std::size_t q = 0; q < p->f(); ++q) loc += p->b(i, q) * z(q);
          acc += dist::t_cdf(r, loc, p->sigma(i), p->nu(i));
        }
        return acc / static_cast<double>(zs->size());
      });
    }
  }
  dm.sample = [p](std::size_t n, Rng& r) { return fm::sample_returns(*p, n, r); };
  return dm;
}

// ---------------------------------------------------------------------------
// Covariance forecast diagnostics

struct CovarianceReport {
  std::size_t s = 0;  // cross-section width
  std::size_t n = 0;  // day count
  double mse = 0.0;   // elementwise mean squared deviation of S from identity
  double box_m = 0.0;
};

// Whitens each day's realized return with the forecast's symmetric PSD
// inverse square root, then measures how close the sample covariance of the
// whitened series sits to the identity.
inline CovarianceReport covariance_diagnostics(const std::vector<MomentForecast>& forecasts,
                                               const std::vector<Tensor>& realized) {
  require(forecasts.size() == realized.size(), "one realized vector per forecast");
  const std::size_t n = forecasts.size();
  require(n >= 2, "need at least two days for a sample covariance");
  const std::size_t s = forecasts.front().mean.numel();
  require(s >= 1, "empty cross-section");
  require(n > s, "need more days than stocks for a nonsingular sample covariance");
  Tensor rot({n, s});
  std::vector<double> proj(s);
  for (std::size_t t = 0; t < n; ++t) {
    const MomentForecast& f = forecasts[t];
    require(f.mean.numel() == s && f.cov.rank() == 2 && f.cov.rows() == s && f.cov.cols() == s,
            "forecast dimensions must agree across days");
    require(realized[t].numel() == s, "realized dimensions must agree across days");
    const linalg::EigResult e = linalg::sym_eig(f.cov);
    if (e.values(0) < 1e-12)
      throw NumericalError("near-singular covariance forecast (eigenvalue " +
                           std::to_string(e.values(0)) + ")");
    for (std::size_t q = 0; q < s; ++q) {
      double acc = 0.0;
      for (std::size_t i = 0; i < s; ++i) acc += e.vectors(i, q) * (realized[t](i) - f.mean(i));
      proj[q] = acc / std::sqrt(e.values(q));
    }
    for (std::size_t i = 0; i < s; ++i) {
      double acc = 0.0;
      for (std::size_t q = 0; q < s; ++q) acc += e.vectors(i, q) * proj[q];
      rot(t, i) = acc;
    }
  }
  for (std::size_t i = 0; i < s; ++i) {
    double mu = 0.0;
    for (std::size_t t = 0; t < n; ++t) mu += rot(t, i);
    mu /= static_cast<double>(n);
    for (std::size_t t = 0; t < n; ++t) rot(t, i) -= mu;
  }
  const Tensor sm = scale(matmul_tn(rot, rot), 1.0 / static_cast<double>(n - 1));
  CovarianceReport rep;
  rep.s = s;
  rep.n = n;
  double fro = 0.0;
  double tr = 0.0;
  for (std::size_t i = 0; i < s; ++i) {
    tr += sm(i, i);
    for (std::size_t j = 0; j < s; ++j) {
      const double d = sm(i, j) - (i == j ? 1.0 : 0.0);
      fro += d * d;
    }
  }
  rep.mse = fro / static_cast<double>(s * s);
  const double logdet = linalg::logdet_from_chol(linalg::cholesky(sm));
  rep.box_m = std::max(0.0, (tr - logdet - static_cast<double>(s)) / static_cast<double>(s));
  return rep;
}

// ---------------------------------------------------------------------------
// Mean-variance portfolios

enum class PortfolioMode { kLongOnly, kLongShort };

struct PortfolioSpec {
  PortfolioMode mode = PortfolioMode::kLongOnly;
  bool unit_leverage = true;  // ||w||_1 = 1; false lifts the budget constraint
  double lambda = 1.0;        // risk aversion
  std::size_t max_iter = 10000;
};

struct PortfolioResult {
  Tensor w;
  double objective = 0.0;
  double kkt_residual = 0.0;
};

namespace detail {

// Euclidean projection onto the probability simplex. The threshold naturally
// turns negative when the input sums below one, spreading the deficit.
inline Tensor project_simplex(const Tensor& v) {
  const std::size_t n = v.numel();
  std::vector<double> u(v.data().begin(), v.data().end());
  std::sort(u.begin(), u.end(), std::greater<double>());
  double run = 0.0;
  double tau = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    run += u[j];
    const double cand = (run - 1.0) / static_cast<double>(j + 1);
    if (u[j] - cand > 0.0) tau = cand;
  }
  Tensor w({n});
  for (std::size_t i = 0; i < n; ++i) w(i) = std::max(v(i) - tau, 0.0);
  return w;
}

// Projection onto {||w||_1 = 1}: project magnitudes onto the simplex and
// restore signs, zeros counting as positive.
inline Tensor project_l1_sphere(const Tensor& v) {
  const std::size_t n = v.numel();
  Tensor a({n});
  for (std::size_t i = 0; i < n; ++i) a(i) = std::abs(v(i));
  const Tensor s = project_simplex(a);
  Tensor w({n});
  for (std::size_t i = 0; i < n; ++i) w(i) = v(i) < 0.0 ? -s(i) : s(i);
  return w;
}

inline Tensor clip_nonneg(const Tensor& v) {
  Tensor w({v.numel()});
  for (std::size_t i = 0; i < v.numel(); ++i) w(i) = std::max(v(i), 0.0);
  return w;
}

// Exact maximizer of the mean-variance objective on one orthant slice of the
// l1 sphere. Fixing support and signs turns the budget into a linear
// equality, and the restricted system is PD, so the slice optimum comes from
// a Schur complement of one Cholesky. Returns false when the stationary
// point leaves the slice.
inline bool orthant_exact(const Tensor& mu, const Tensor& cov, double lambda,
                          const std::vector<int>& pattern, Tensor& w_out) {
  const std::size_t n = mu.numel();
  std::vector<std::size_t> sup;
  for (std::size_t i = 0; i < n; ++i)
    if (pattern[i] != 0) sup.push_back(i);
  if (sup.empty()) return false;
  const std::size_t k = sup.size();
  Tensor a({k, k});
  Tensor b({k});
  Tensor ones({k});
  for (std::size_t p = 0; p < k; ++p) {
    const double sp = pattern[sup[p]];
    b(p) = sp * mu(sup[p]);
    ones(p) = 1.0;
    for (std::size_t q = 0; q < k; ++q)
      a(p, q) = lambda * sp * cov(sup[p], sup[q]) * pattern[sup[q]];
  }
  Tensor l;
  try {
    l = linalg::cholesky(a);
  } catch (const DecompositionError&) {
    return false;
  }
  const Tensor ab = linalg::chol_solve(l, b);
  const Tensor ac = linalg::chol_solve(l, ones);
  double cb = 0.0, cc = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    cb += ab(p);
    cc += ac(p);
  }
  if (cc <= 0.0) return false;
  const double theta = (cb - 1.0) / cc;
  w_out = Tensor({n});
  for (std::size_t p = 0; p < k; ++p) {
    const double v = ab(p) - theta * ac(p);
    if (v <= 0.0) return false;
    w_out(sup[p]) = pattern[sup[p]] * v;
  }
  return true;
}

}  // namespace detail

// Maximizes w'mu - (lambda/2) w'Sigma w under the mode and leverage
// constraints. The unconstrained long-short case is closed form; the rest run
// projected gradient ascent with step 1/(lambda lambda_max), started from
// both the projected origin and the projected unconstrained optimum.
inline PortfolioResult optimize_portfolio(const MomentForecast& f, const PortfolioSpec& spec) {
  const std::size_t n = f.mean.numel();
  require(n >= 1, "portfolio needs at least one asset");
  require(f.cov.rank() == 2 && f.cov.rows() == n && f.cov.cols() == n,
          "covariance must be square and match the mean");
  require(spec.lambda > 0.0, "risk aversion must be positive");
  require(spec.max_iter >= 1, "need at least one iteration");
  const Tensor l = linalg::cholesky(f.cov);

  auto objective = [&](const Tensor& w) {
    double lin = 0.0;
    double quad = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      lin += w(i) * f.mean(i);
      for (std::size_t j = 0; j < n; ++j) quad += w(i) * f.cov(i, j) * w(j);
    }
    return lin - 0.5 * spec.lambda * quad;
  };
  auto gradient = [&](const Tensor& w) {
    Tensor g({n});
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += f.cov(i, j) * w(j);
      g(i) = f.mean(i) - spec.lambda * acc;
    }
    return g;
  };

  Tensor star = linalg::chol_solve(l, f.mean);
  for (std::size_t i = 0; i < n; ++i) star(i) /= spec.lambda;

  PortfolioResult out;
  if (spec.mode == PortfolioMode::kLongShort && !spec.unit_leverage) {
    out.w = star;
    const Tensor g = gradient(out.w);
    double res = 0.0;
    for (std::size_t i = 0; i < n; ++i) res = std::max(res, std::abs(g(i)));
    out.kkt_residual = res;
    out.objective = objective(out.w);
    return out;
  }

  const bool sphere = spec.mode == PortfolioMode::kLongShort;
  std::function<Tensor(const Tensor&)> project;
  if (spec.mode == PortfolioMode::kLongOnly && spec.unit_leverage)
    project = detail::project_simplex;
  else if (spec.mode == PortfolioMode::kLongOnly)
    project = detail::clip_nonneg;
  else
    project = detail::project_l1_sphere;

  const linalg::EigResult eig = linalg::sym_eig(f.cov);
  const double step = 1.0 / (spec.lambda * eig.values(n - 1));
  auto run = [&](Tensor w) {
    for (std::size_t it = 0; it < spec.max_iter; ++it) {
      const Tensor g = gradient(w);
      Tensor cand({n});
      for (std::size_t i = 0; i < n; ++i) cand(i) = w(i) + step * g(i);
      const Tensor wn = project(cand);
      double moved = 0.0;
      for (std::size_t i = 0; i < n; ++i) moved = std::max(moved, std::abs(wn(i) - w(i)));
      w = wn;
      if (moved <= 1e-16) break;
    }
    return w;
  };

  // The l1 sphere is nonconvex, so ascent is run from several deterministic
  // starts: the projected origin, the projected unconstrained optimum, and
  // both signings of the minimum variance eigenvector, whose face usually
  // holds the global point when the budget forces leverage up. A sign flip
  // polish then escapes single coordinate face traps.
  std::vector<Tensor> starts;
  starts.push_back(project(Tensor({n})));
  starts.push_back(project(star));
  if (sphere) {
    Tensor vmin({n}), vneg({n});
    for (std::size_t i = 0; i < n; ++i) {
      vmin(i) = eig.vectors(i, 0);
      vneg(i) = -eig.vectors(i, 0);
    }
    starts.push_back(project(vmin));
    starts.push_back(project(vneg));
  }
  Tensor w = run(starts[0]);
  double best_obj = objective(w);
  for (std::size_t k = 1; k < starts.size(); ++k) {
    const Tensor wk = run(starts[k]);
    const double ok = objective(wk);
    if (ok > best_obj) {
      w = wk;
      best_obj = ok;
    }
  }
  if (sphere) {
    for (std::size_t i = 0; i < n; ++i) {
      if (w(i) == 0.0) continue;
      Tensor flip = w;
      flip(i) = -flip(i);
      const Tensor wf = run(project(flip));
      const double of = objective(wf);
      if (of > best_obj) {
        w = wf;
        best_obj = of;
      }
    }
  }

  const Tensor g = gradient(w);
  Tensor cand({n});
  for (std::size_t i = 0; i < n; ++i) cand(i) = w(i) + step * g(i);
  const Tensor fix = project(cand);
  double res = 0.0;
  for (std::size_t i = 0; i < n; ++i) res = std::max(res, std::abs(fix(i) - w(i)));
  out.w = w;
  out.objective = objective(w);
  out.kkt_residual = res / step;
  return out;
}

// ---------------------------------------------------------------------------
// Backtests

struct BacktestDay {
  std::vector<std::size_t> stocks;  // panel ids aligned with the forecast rows
  MomentForecast forecast;
  Tensor realized;  // next-day returns in normalized units
};

struct BacktestReport {
  std::vector<double> returns;     // daily portfolio returns, de-normalized
  std::vector<double> cumulative;  // compounded growth minus one
  double sharpe = 0.0;
  double turnover = 0.0;
};

inline BacktestReport backtest(const std::vector<BacktestDay>& days, const PortfolioSpec& spec,
                               double norm_constant = 1.0) {
  require(!days.empty(), "backtest needs at least one day");
  require(norm_constant > 0.0, "norm constant must be positive");
  BacktestReport rep;
  rep.returns.reserve(days.size());
  rep.cumulative.reserve(days.size());
  std::map<std::size_t, double> prev;
  double growth = 1.0;
  double tdist = 0.0;
  for (const BacktestDay& day : days) {
    const std::size_t m = day.stocks.size();
    require(m >= 1, "backtest day has no stocks");
    require(day.forecast.mean.numel() == m && day.realized.numel() == m,
            "backtest day rows must align");
    const PortfolioResult res = optimize_portfolio(day.forecast, spec);
    double r = 0.0;
    std::map<std::size_t, double> cur;
    for (std::size_t k = 0; k < m; ++k) {
      r += res.w(k) * day.realized(k);
      cur.emplace(day.stocks[k], res.w(k));
    }
    require(cur.size() == m, "duplicate stock id in a backtest day");
    r *= norm_constant;
    rep.returns.push_back(r);
    growth *= 1.0 + r;
    rep.cumulative.push_back(growth - 1.0);
    if (rep.returns.size() > 1) {
      double d = 0.0;
      for (const auto& [id, w] : cur) {
        const auto it = prev.find(id);
        d += std::abs(w - (it == prev.end() ? 0.0 : it->second));
        if (it != prev.end()) prev.erase(it);
      }
      for (const auto& [id, w] : prev) {
        (void)id;
        d += std::abs(w);
      }
      tdist += d;
    }
    prev = std::move(cur);
  }
  const double t = static_cast<double>(rep.returns.size());
  double mean = 0.0;
  for (double r : rep.returns) mean += r;
  mean /= t;
  double var = 0.0;
  for (double r : rep.returns) var += (r - mean) * (r - mean);
  var /= t;
  const double sd = std::sqrt(var);
  rep.sharpe = sd > 0.0 ? mean / sd * std::sqrt(252.0) : 0.0;
  rep.turnover = rep.returns.size() > 1 ? tdist / (t - 1.0) : 0.0;
  return rep;
}

}  // namespace nf::ev
