#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuralfactors/factor_math.hpp"
#include "neuralfactors/panel.hpp"

// Ground-truth linear factor market. Everything downstream is graded against
// panels produced here, so generation is fully determined by one seed and the
// truth parameters are exportable for oracle re-loading.
namespace nf::synth {

struct SyntheticTruth {
  Tensor alpha;    // (N)
  Tensor b;        // (N, F)
  Tensor sigma;    // (N)
  Tensor nu;       // (N)
  Tensor sigma_z;  // (F)
  Tensor nu_z;     // (F)
  std::uint64_t seed = 0;
  double norm_constant = 0.02672357;

  // feature and universe generation
  std::size_t n_sectors = 6;
  std::vector<std::size_t> sector;  // (N) assignment
  Tensor latent;                    // (N) persistent trait behind the B rows
  double gap_prob = 0.0;            // chance of a late entry / absence block

  std::size_t n() const { return alpha.numel(); }
  std::size_t f() const { return sigma_z.numel(); }

  fm::FactorParams factor_params() const {
    fm::FactorParams p;
    p.alpha = alpha;
    p.b = b;
    p.sigma = sigma;
    p.nu = nu;
    p.sigma_z = sigma_z;
    p.nu_z = nu_z;
    return p;
  }

  void validate() const {
    factor_params().validate();
    require(norm_constant > 0.0, "norm_constant must be positive");
    require(sector.size() == n() && latent.numel() == n(), "sector/latent must cover N stocks");
    // full column rank of B via the smallest eigenvalue of B^T B
    Tensor gram = matmul_tn(b, b);
    linalg::EigResult eig = linalg::sym_eig(gram);
    require(eig.values(0) > 1e-10 * std::max(1.0, eig.values(f() - 1)),
            "B must have full column rank");
  }
};

struct TruthConfig {
  std::size_t n = 48;
  std::size_t f = 4;
  std::uint64_t seed = 1;
  std::size_t n_sectors = 6;
  double gap_prob = 0.0;
  double norm_constant = 0.02672357;
};

// B rows are a smooth function of observable structure: an affine term in the
// sector one-hot and a persistent per-stock latent, plus a clipped sine of
// the latent. The latent leaks into a noisy feature channel, so exposures are
// recoverable from features without return history.
inline SyntheticTruth make_truth(const TruthConfig& cfg) {
  require(cfg.n >= 1 && cfg.f >= 1, "need at least 1 stock and 1 factor");
  require(cfg.n_sectors >= 1, "need at least one sector");
  SyntheticTruth t;
  t.seed = cfg.seed;
  t.norm_constant = cfg.norm_constant;
  t.n_sectors = cfg.n_sectors;
  t.gap_prob = cfg.gap_prob;

  const std::size_t N = cfg.n, F = cfg.f, S = cfg.n_sectors;
  Rng r_lat(Rng::substream(cfg.seed, "truth.latent"));
  Rng r_coef(Rng::substream(cfg.seed, "truth.coef"));
  Rng r_stock(Rng::substream(cfg.seed, "truth.stock"));
  Rng r_prior(Rng::substream(cfg.seed, "truth.prior"));

  t.sector.resize(N);
  for (std::size_t i = 0; i < N; ++i) t.sector[i] = i % S;
  t.latent = Tensor::randn({N}, r_lat);

  Tensor base({S, F}), slope({F}), phase({S, F});
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t q = 0; q < F; ++q) {
      base(s, q) = 0.30 * r_coef.normal();
      phase(s, q) = 2.0 * M_PI * r_coef.uniform();
    }
  for (std::size_t q = 0; q < F; ++q) slope(q) = 0.18 * r_coef.normal();

  t.b = Tensor({N, F});
  for (std::size_t i = 0; i < N; ++i) {
    const double u = t.latent(i);
    for (std::size_t q = 0; q < F; ++q) {
      const double wave = std::sin(1.7 * u + phase(t.sector[i], q));
      t.b(i, q) = base(t.sector[i], q) + slope(q) * u +
                  0.22 * std::clamp(wave, -0.9, 0.9);
    }
  }
  // the first factor acts as a market mode every stock loads on
  for (std::size_t i = 0; i < N; ++i) t.b(i, 0) += 0.55;

  t.alpha = Tensor({N});
  t.sigma = Tensor({N});
  t.nu = Tensor({N});
  for (std::size_t i = 0; i < N; ++i) {
    t.alpha(i) = 0.03 * r_stock.normal();
    t.sigma(i) = std::clamp(0.62 * std::exp(0.22 * r_stock.normal()), 0.35, 1.2);
    t.nu(i) = 5.0 + 7.0 * r_stock.uniform();
  }

  t.sigma_z = Tensor({F});
  t.nu_z = Tensor({F});
  for (std::size_t q = 0; q < F; ++q) {
    t.sigma_z(q) = 0.55 + 0.5 * r_prior.uniform();
    t.nu_z(q) = 6.0 + 5.0 * r_prior.uniform();
  }
  t.validate();
  return t;
}

// Weekday-only synthetic calendar starting Monday 2010-01-04
inline std::vector<std::string> make_calendar(std::size_t days) {
  static const int kMonthDays[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  int y = 2010, m = 1, d = 4, weekday = 0;  // Monday
  std::vector<std::string> out;
  out.reserve(days);
  char buf[16];
  while (out.size() < days) {
    if (weekday < 5) {
      std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", y, m, d);
      out.emplace_back(buf);
    }
    weekday = (weekday + 1) % 7;
    int md = kMonthDays[m - 1];
    if (m == 2 && ((y % 4 == 0 && y % 100 != 0) || y % 400 == 0)) md = 29;
    if (++d > md) {
      d = 1;
      if (++m > 12) {
        m = 1;
        ++y;
      }
    }
  }
  return out;
}

struct SyntheticPanel {
  data::ReturnsPanel panel;
  data::FeaturePanel features;
  Tensor z_true;  // (T, F), day t's factor draw behind day t's returns
};

inline SyntheticPanel generate(const SyntheticTruth& t, std::size_t days) {
  require(days >= 2, "need at least two days");
  const std::size_t N = t.n(), F = t.f();
  SyntheticPanel out;
  data::ReturnsPanel& p = out.panel;
  p.dates = make_calendar(days);
  p.tickers.reserve(N);
  char buf[16];
  for (std::size_t i = 0; i < N; ++i) {
    std::snprintf(buf, sizeof(buf), "S%04zu", i);
    p.tickers.emplace_back(buf);
  }
  p.norm_constant = t.norm_constant;
  p.membership.assign(days * N, 1);
  p.returns = Tensor({days, N});

  // membership: per stock an optional late entry or one absence block
  for (std::size_t i = 0; i < N; ++i) {
    Rng rng(Rng::substream(t.seed, "universe", i));
    const double u_entry = rng.uniform();
    const double u_block = rng.uniform();
    const std::size_t entry = 1 + rng.uniform_index(days / 2);
    const std::size_t start = 1 + rng.uniform_index(days - 1);
    const std::size_t len = 3 + rng.uniform_index(38);
    if (u_entry < t.gap_prob)
      for (std::size_t day = 0; day < entry; ++day) p.membership[day * N + i] = 0;
    if (u_block < t.gap_prob)
      for (std::size_t day = start; day < std::min(days, start + len); ++day)
        p.membership[day * N + i] = 0;
  }

  out.z_true = Tensor({days, F});
  Tensor obs_noise({days, N});
  for (std::size_t day = 0; day < days; ++day) {
    Rng rng(Rng::substream(t.seed, "day", day));
    for (std::size_t q = 0; q < F; ++q)
      out.z_true(day, q) = dist::t_sample(rng, 0.0, t.sigma_z(q), t.nu_z(q));
    for (std::size_t i = 0; i < N; ++i) {
      double loc = t.alpha(i);
      for (std::size_t q = 0; q < F; ++q) loc += t.b(i, q) * out.z_true(day, q);
      const double r = dist::t_sample(rng, loc, t.sigma(i), t.nu(i));
      if (p.membership[day * N + i]) p.returns(day, i) = r;
    }
    for (std::size_t i = 0; i < N; ++i) obs_noise(day, i) = rng.normal();
  }

  data::FeaturePanel& f = out.features;
  f.ts_names = {"lag_ret", "latent_obs"};
  f.ts = Tensor({days, N, 2});
  for (std::size_t day = 0; day < days; ++day)
    for (std::size_t i = 0; i < N; ++i) {
      if (day > 0 && p.membership[(day - 1) * N + i])
        f.ts.at3(day, i, 0) = p.returns(day - 1, i);
      f.ts.at3(day, i, 1) = t.latent(i) + 0.3 * obs_noise(day, i);
    }
  f.static_names.reserve(t.n_sectors);
  for (std::size_t s = 0; s < t.n_sectors; ++s)
    f.static_names.push_back("sector" + std::to_string(s));
  f.st = Tensor({N, t.n_sectors});
  for (std::size_t i = 0; i < N; ++i) f.st(i, t.sector[i]) = 1.0;
  return out;
}

// Exact first and second moments of a day's member cross-section
inline MomentForecast true_moments(const SyntheticTruth& t,
                                   const std::vector<std::size_t>& stocks) {
  return fm::moments(t.factor_params().subset(stocks));
}

inline MomentForecast true_moments(const SyntheticTruth& t) {
  std::vector<std::size_t> all(t.n());
  for (std::size_t i = 0; i < t.n(); ++i) all[i] = i;
  return true_moments(t, all);
}

// Reference joint NLL per stock for one day's returns under the truth
inline double true_nll_joint(const SyntheticTruth& t, const Tensor& r,
                             const std::vector<std::size_t>& stocks, std::size_t k = 10000,
                             std::uint64_t sample_seed = 7701) {
  Rng rng(Rng::substream(t.seed ^ 0x5ca1ab1eull, "truth.nll", sample_seed));
  return fm::iwae_nll(t.factor_params().subset(stocks), r, k, rng);
}

inline nlohmann::json truth_to_json(const SyntheticTruth& t) {
  auto vec = [](const Tensor& x) {
    return std::vector<double>(x.data().begin(), x.data().end());
  };
  nlohmann::json j;
  j["n"] = t.n();
  j["f"] = t.f();
  j["alpha"] = vec(t.alpha);
  j["b"] = vec(t.b);
  j["sigma"] = vec(t.sigma);
  j["nu"] = vec(t.nu);
  j["sigma_z"] = vec(t.sigma_z);
  j["nu_z"] = vec(t.nu_z);
  j["seed"] = t.seed;
  j["norm_constant"] = t.norm_constant;
  j["n_sectors"] = t.n_sectors;
  j["sector"] = t.sector;
  j["latent"] = vec(t.latent);
  j["gap_prob"] = t.gap_prob;
  return j;
}

inline SyntheticTruth truth_from_json(const nlohmann::json& j) {
  auto ten = [&](const char* key, Shape shape) {
    std::vector<double> v = j.at(key).get<std::vector<double>>();
    return Tensor::from(std::move(shape), v);
  };
  SyntheticTruth t;
  const std::size_t N = j.at("n").get<std::size_t>();
  const std::size_t F = j.at("f").get<std::size_t>();
  t.alpha = ten("alpha", {N});
  t.b = ten("b", {N, F});
  t.sigma = ten("sigma", {N});
  t.nu = ten("nu", {N});
  t.sigma_z = ten("sigma_z", {F});
  t.nu_z = ten("nu_z", {F});
  t.seed = j.at("seed").get<std::uint64_t>();
  t.norm_constant = j.at("norm_constant").get<double>();
  t.n_sectors = j.at("n_sectors").get<std::size_t>();
  t.sector = j.at("sector").get<std::vector<std::size_t>>();
  t.latent = ten("latent", {N});
  t.gap_prob = j.at("gap_prob").get<double>();
  t.validate();
  return t;
}

inline void save_truth(const SyntheticTruth& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << truth_to_json(t).dump(2) << '\n';
}

inline SyntheticTruth load_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return truth_from_json(j);
}

}  // namespace nf::synth
