#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "neuralfactors/synthetic.hpp"
#include "oracles.hpp"

using namespace nf;
using namespace nf::synth;
using Catch::Approx;

namespace {

// truth with hand-picked parameters, bypassing make_truth
SyntheticTruth hand_truth(std::size_t n, std::size_t f, double beta, double sigma, double nu,
                          double sigma_z, double nu_z) {
  SyntheticTruth t;
  t.alpha = Tensor({n});
  t.b = Tensor::full({n, f}, beta);
  t.sigma = Tensor::full({n}, sigma);
  t.nu = Tensor::full({n}, nu);
  t.sigma_z = Tensor::full({f}, sigma_z);
  t.nu_z = Tensor::full({f}, nu_z);
  t.seed = 99;
  t.sector.assign(n, 0);
  t.latent = Tensor({n});
  t.n_sectors = 1;
  return t;
}

double sample_corr(const Tensor& returns, std::size_t i, std::size_t j) {
  const std::size_t T = returns.rows();
  double mi = 0.0, mj = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    mi += returns(t, i);
    mj += returns(t, j);
  }
  mi /= T;
  mj /= T;
  double sij = 0.0, sii = 0.0, sjj = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double a = returns(t, i) - mi, b = returns(t, j) - mj;
    sij += a * b;
    sii += a * a;
    sjj += b * b;
  }
  return sij / std::sqrt(sii * sjj);
}

}  // namespace

TEST_CASE("calendar is weekday-only and strictly increasing", "[synthetic]") {
  auto cal = make_calendar(7);
  REQUIRE(cal.size() == 7);
  CHECK(cal[0] == "2010-01-04");
  CHECK(cal[4] == "2010-01-08");
  CHECK(cal[5] == "2010-01-11");  // weekend skipped
  for (std::size_t i = 1; i < cal.size(); ++i) CHECK(cal[i - 1] < cal[i]);
  auto big = make_calendar(600);
  for (std::size_t i = 1; i < big.size(); ++i) CHECK(big[i - 1] < big[i]);
}

TEST_CASE("zero loadings give uncorrelated stocks", "[synthetic]") {
  SyntheticTruth t = hand_truth(4, 1, 0.0, 0.8, 6.0, 1.0, 8.0);
  const std::size_t T = 10000;
  SyntheticPanel g = generate(t, T);
  const double bound = 3.0 / std::sqrt(static_cast<double>(T));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j)
      CHECK(std::abs(sample_corr(g.panel.returns, i, j)) < bound);
}

TEST_CASE("single shared factor gives the analytic equicorrelation", "[synthetic]") {
  const double sigma = 0.7, nu = 8.0, sigma_z = 1.0, nu_z = 9.0;
  SyntheticTruth t = hand_truth(5, 1, 1.0, sigma, nu, sigma_z, nu_z);
  const std::size_t T = 10000;
  SyntheticPanel g = generate(t, T);
  const double vz = dist::matched_variance(sigma_z, nu_z);
  const double vx = dist::matched_variance(sigma, nu);
  const double rho = vz / (vz + vx);
  const double se = (1.0 - rho * rho) / std::sqrt(static_cast<double>(T));
  std::vector<double> cs;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = i + 1; j < 5; ++j) cs.push_back(sample_corr(g.panel.returns, i, j));
  for (double c : cs) CHECK(c == Approx(rho).margin(4.0 * se));
  // pairwise estimates cluster: spread is sampling noise, not structure
  for (double c : cs) CHECK(std::abs(c - cs[0]) < 8.0 * se);
}

TEST_CASE("generation is reproducible from the seed", "[synthetic]") {
  TruthConfig cfg;
  cfg.n = 12;
  cfg.f = 3;
  cfg.seed = 321;
  cfg.gap_prob = 0.2;
  SyntheticTruth t = make_truth(cfg);
  SyntheticPanel a = generate(t, 300);
  SyntheticPanel b = generate(t, 300);
  REQUIRE(a.panel.membership == b.panel.membership);
  for (std::size_t i = 0; i < a.panel.returns.numel(); ++i)
    REQUIRE(a.panel.returns(i) == b.panel.returns(i));
  for (std::size_t i = 0; i < a.features.ts.numel(); ++i)
    REQUIRE(a.features.ts(i) == b.features.ts(i));
  for (std::size_t i = 0; i < a.z_true.numel(); ++i) REQUIRE(a.z_true(i) == b.z_true(i));
}

TEST_CASE("membership gaps never leak values", "[synthetic]") {
  TruthConfig cfg;
  cfg.n = 20;
  cfg.f = 2;
  cfg.seed = 9;
  cfg.gap_prob = 0.5;
  SyntheticTruth t = make_truth(cfg);
  SyntheticPanel g = generate(t, 400);
  std::size_t gaps = 0;
  for (std::size_t day = 0; day < 400; ++day)
    for (std::size_t i = 0; i < 20; ++i)
      if (!g.panel.is_member(day, i)) {
        ++gaps;
        CHECK(g.panel.returns(day, i) == 0.0);
        if (day + 1 < 400) CHECK(g.features.ts.at3(day + 1, i, 0) == 0.0);  // no lagged leak
      }
  CHECK(gaps > 0);
  CHECK(g.panel.returns.all_finite());
  // windows over a gap stay finite with flags off
  data::DayWindows w = data::make_windows(g.panel, g.features, 399, 32);
  CHECK(w.seq.all_finite());
}

TEST_CASE("true moments: diagonal and two-stock cases", "[synthetic]") {
  SyntheticTruth t0 = hand_truth(3, 1, 0.0, 0.9, 5.0, 1.0, 8.0);
  MomentForecast m0 = true_moments(t0);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(m0.cov(i, i) == Approx(dist::matched_variance(0.9, 5.0)).epsilon(1e-14));
    for (std::size_t j = 0; j < 3; ++j)
      if (i != j) CHECK(m0.cov(i, j) == 0.0);
  }

  // unit loadings, unit factor and idio variance: [[2,1],[1,2]]
  SyntheticTruth t1 = hand_truth(2, 1, 1.0, 1.0, dist::kNuCap, 1.0, dist::kNuCap);
  t1.alpha(0) = 0.1;
  t1.alpha(1) = -0.2;
  MomentForecast m1 = true_moments(t1);
  CHECK(m1.mean(0) == Approx(0.1));
  CHECK(m1.mean(1) == Approx(-0.2));
  CHECK(m1.cov(0, 0) == Approx(2.0).epsilon(1e-14));
  CHECK(m1.cov(1, 1) == Approx(2.0).epsilon(1e-14));
  CHECK(m1.cov(0, 1) == Approx(1.0).epsilon(1e-14));
  CHECK(m1.cov(1, 0) == Approx(1.0).epsilon(1e-14));
}

TEST_CASE("true moments match a long sample covariance", "[synthetic]") {
  TruthConfig cfg;
  cfg.n = 6;
  cfg.f = 2;
  cfg.seed = 17;
  SyntheticTruth t = make_truth(cfg);
  const std::size_t T = 500000;
  SyntheticPanel g = generate(t, T);
  MomentForecast want = true_moments(t);

  Tensor mean({6});
  for (std::size_t day = 0; day < T; ++day)
    for (std::size_t i = 0; i < 6; ++i) mean(i) += g.panel.returns(day, i);
  for (std::size_t i = 0; i < 6; ++i) mean(i) /= static_cast<double>(T);
  Tensor cov({6, 6});
  for (std::size_t day = 0; day < T; ++day)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j <= i; ++j)
        cov(i, j) += (g.panel.returns(day, i) - mean(i)) * (g.panel.returns(day, j) - mean(j));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      cov(i, j) /= static_cast<double>(T);
      cov(j, i) = cov(i, j);
    }
  CHECK(oracle::rel_frobenius(cov, want.cov) < 0.01);
  for (std::size_t i = 0; i < 6; ++i) CHECK(mean(i) == Approx(want.mean(i)).margin(0.01));
}

TEST_CASE("true joint nll: factorized case is exact", "[synthetic]") {
  SyntheticTruth t = hand_truth(4, 2, 0.0, 0.8, 6.0, 1.0, 8.0);
  t.alpha(1) = 0.3;
  Tensor r = Tensor::from({4}, {0.5, -1.2, 0.0, 2.0});
  std::vector<std::size_t> all = {0, 1, 2, 3};
  double got = true_nll_joint(t, r, all, 100);
  double want = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    want -= dist::t_logpdf(r(i), t.alpha(i), 0.8, 6.0);
  want /= 4.0;
  CHECK(got == Approx(want).epsilon(1e-15));
}

TEST_CASE("true joint nll is a stable estimate", "[synthetic]") {
  TruthConfig cfg;
  cfg.seed = 23;
  SyntheticTruth t = make_truth(cfg);
  SyntheticPanel g = generate(t, 40);
  std::vector<std::size_t> all = data::members_at(g.panel, 30);
  Tensor r = data::gather_returns(g.panel, 30, all);
  const double a = true_nll_joint(t, r, all, 10000, 1);
  const double b = true_nll_joint(t, r, all, 20000, 2);
  CHECK(std::abs(a - b) < 0.005);
}

TEST_CASE("truth beats a variance-matched diagonal misspecification", "[synthetic]") {
  TruthConfig cfg;
  cfg.n = 24;
  cfg.f = 3;
  cfg.seed = 31;
  SyntheticTruth t = make_truth(cfg);
  // diagonal variant: loadings dropped, per-stock scale inflated so each
  // marginal variance is preserved
  SyntheticTruth d = t;
  MomentForecast m = true_moments(t);
  d.b = Tensor({t.n(), t.f()});
  for (std::size_t i = 0; i < t.n(); ++i)
    d.sigma(i) = std::sqrt(m.cov(i, i) * (t.nu(i) - 2.0) / t.nu(i));

  SyntheticPanel g = generate(t, 250);
  double nll_true = 0.0, nll_diag = 0.0;
  std::vector<std::size_t> all(t.n());
  for (std::size_t i = 0; i < t.n(); ++i) all[i] = i;
  for (std::size_t day = 0; day < 250; ++day) {
    Tensor r = data::gather_returns(g.panel, day, all);
    nll_true += true_nll_joint(t, r, all, 2000, day);
    nll_diag += true_nll_joint(d, r, all, 2000, day);
  }
  CHECK(nll_true / 250.0 < nll_diag / 250.0 - 0.01);
}

TEST_CASE("gaussian limit configuration matches the closed form", "[synthetic]") {
  SyntheticTruth t = hand_truth(8, 2, 0.4, 0.9, dist::kNuCap, 0.8, dist::kNuCap);
  for (std::size_t i = 0; i < 8; ++i) t.b(i, 1) = 0.1 * static_cast<double>(i) - 0.35;
  SyntheticPanel g = generate(t, 30);
  std::vector<std::size_t> all(8);
  for (std::size_t i = 0; i < 8; ++i) all[i] = i;
  for (std::size_t day : {5, 12, 29}) {
    Tensor r = data::gather_returns(g.panel, day, all);
    const double is = true_nll_joint(t, r, all, 500);
    const double exact = fm::gaussian_joint_nll(t.factor_params(), r);
    CHECK(is == Approx(exact).margin(1e-9));  // weights are constant here
  }
}

TEST_CASE("posterior mean solves the regularized normal equations", "[synthetic]") {
  // independent check of the proposal used inside the nll oracle
  TruthConfig cfg;
  cfg.n = 16;
  cfg.f = 3;
  cfg.seed = 77;
  SyntheticTruth t = make_truth(cfg);
  SyntheticPanel g = generate(t, 10);
  std::vector<std::size_t> all(16);
  for (std::size_t i = 0; i < 16; ++i) all[i] = i;
  Tensor r = data::gather_returns(g.panel, 5, all);
  fm::FactorParams p = t.factor_params();
  fm::PosteriorChol post = fm::posterior_chol(p, r);

  // build (Sigma_z^-1 + B^T W B) m = B^T W (r - alpha) densely and solve by
  // gaussian elimination on the explicit inverse
  Tensor varx = fm::variance_vector(p.sigma, p.nu, true);
  Tensor varz = fm::variance_vector(p.sigma_z, p.nu_z, true);
  Tensor a({3, 3});
  Tensor rhs({3});
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t q = 0; q < 3; ++q) {
      rhs(q) += p.b(i, q) * (r(i) - p.alpha(i)) / varx(i);
      for (std::size_t c = 0; c < 3; ++c) a(q, c) += p.b(i, q) * p.b(i, c) / varx(i);
    }
  for (std::size_t q = 0; q < 3; ++q) a(q, q) += 1.0 / varz(q);
  Tensor inv = linalg::spd_inverse(a);
  Tensor want({3});
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t c = 0; c < 3; ++c) want(q) += inv(q, c) * rhs(c);
  for (std::size_t q = 0; q < 3; ++q) CHECK(post.mean(q) == Approx(want(q)).epsilon(1e-10));

  // covariance from the factor matches the explicit inverse
  Tensor pc = post.covariance();
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t c = 0; c < 3; ++c) CHECK(pc(q, c) == Approx(inv(q, c)).margin(1e-12));
}

TEST_CASE("truth json round-trips bit-exactly", "[synthetic]") {
  TruthConfig cfg;
  cfg.n = 10;
  cfg.f = 2;
  cfg.seed = 5;
  cfg.gap_prob = 0.1;
  SyntheticTruth t = make_truth(cfg);
  const std::string path = "/tmp/nf_truth_rt.json";
  save_truth(t, path);
  SyntheticTruth u = load_truth(path);
  std::remove(path.c_str());
  for (std::size_t i = 0; i < t.alpha.numel(); ++i) REQUIRE(u.alpha(i) == t.alpha(i));
  for (std::size_t i = 0; i < t.b.numel(); ++i) REQUIRE(u.b(i) == t.b(i));
  for (std::size_t i = 0; i < t.sigma.numel(); ++i) {
    REQUIRE(u.sigma(i) == t.sigma(i));
    REQUIRE(u.nu(i) == t.nu(i));
  }
  for (std::size_t q = 0; q < t.f(); ++q) {
    REQUIRE(u.sigma_z(q) == t.sigma_z(q));
    REQUIRE(u.nu_z(q) == t.nu_z(q));
  }
  CHECK(u.seed == t.seed);
  CHECK(u.sector == t.sector);
  CHECK(u.norm_constant == t.norm_constant);
}

TEST_CASE("single stock degenerate market still generates", "[synthetic]") {
  TruthConfig cfg;
  cfg.n = 1;
  cfg.f = 1;
  cfg.seed = 2;
  SyntheticTruth t = make_truth(cfg);
  SyntheticPanel g = generate(t, 50);
  CHECK(g.panel.width() == 1);
  CHECK(g.panel.returns.all_finite());
  CHECK(g.panel.members_on(10) == 1);
}
