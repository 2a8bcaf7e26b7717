#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "neuralfactors/linalg.hpp"
#include "neuralfactors/model.hpp"
#include "neuralfactors/synthetic.hpp"
#include "oracles.hpp"

using namespace nf;
using model::Arch;
using model::ModelConfig;

namespace {

ModelConfig tiny_config(Arch arch, double dropout = 0.0) {
  ModelConfig cfg;
  cfg.f = 2;
  cfg.lookback = 2;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.dropout = dropout;
  cfg.arch = arch;
  cfg.k_iwae = 3;
  cfg.seed = 11;
  cfg.channels = 4;
  cfg.d_static = 3;
  return cfg;
}

// windows filled with noise; bypasses the panel loader for unit-level control
data::DayWindows noise_windows(std::size_t n, std::size_t lookback, std::size_t channels,
                               std::size_t d_static, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  data::DayWindows w;
  w.t = lookback;
  w.lookback = lookback;
  w.stocks.resize(n);
  for (std::size_t i = 0; i < n; ++i) w.stocks[i] = i;
  w.seq = Tensor::randn({n * (lookback + 1), channels}, rng, scale);
  for (std::size_t r = 0; r < w.seq.rows(); ++r) w.seq(r, channels - 1) = 1.0;
  w.st = Tensor::randn({n, d_static}, rng, scale);
  return w;
}

data::DayWindows permute_windows(const data::DayWindows& w, const std::vector<std::size_t>& perm) {
  data::DayWindows out = w;
  const std::size_t L = w.seq_len(), C = w.channels();
  for (std::size_t n = 0; n < perm.size(); ++n) {
    out.stocks[n] = w.stocks[perm[n]];
    for (std::size_t u = 0; u < L; ++u)
      for (std::size_t c = 0; c < C; ++c) out.seq(n * L + u, c) = w.seq(perm[n] * L + u, c);
    for (std::size_t c = 0; c < w.st.cols(); ++c) out.st(n, c) = w.st(perm[n], c);
  }
  return out;
}

fm::FactorParams random_params(std::size_t n, std::size_t f, std::uint64_t seed,
                               double nu_lo = 5.0, std::size_t capped_every = 0) {
  Rng rng(seed);
  fm::FactorParams p;
  p.alpha = Tensor::randn({n}, rng, 0.05);
  p.b = Tensor::randn({n, f}, rng, 0.4);
  p.sigma = Tensor({n});
  p.nu = Tensor({n});
  for (std::size_t i = 0; i < n; ++i) {
    p.sigma(i) = 0.5 + rng.uniform();
    p.nu(i) = (capped_every && i % capped_every == 0) ? dist::kNuCap : nu_lo + 4.0 * rng.uniform();
  }
  p.sigma_z = Tensor({f});
  p.nu_z = Tensor({f});
  for (std::size_t q = 0; q < f; ++q) {
    p.sigma_z(q) = 0.7 + 0.5 * rng.uniform();
    p.nu_z(q) = nu_lo + 3.0 * rng.uniform();
  }
  return p;
}

model::DayParamsVal lift_params(ad::Tape& tape, const fm::FactorParams& p) {
  model::DayParamsVal v;
  const std::size_t n = p.n();
  v.alpha = tape.leaf(p.alpha.reshaped({n, 1}));
  v.b = tape.leaf(p.b);
  v.sigma = tape.leaf(p.sigma.reshaped({n, 1}));
  v.nu = tape.leaf(p.nu.reshaped({n, 1}));
  return v;
}

double tape_ciwae(const fm::FactorParams& p, const Tensor& r, std::size_t k,
                  std::uint64_t seed) {
  ad::Tape tape;
  model::DayParamsVal v = lift_params(tape, p);
  ad::Val sz = tape.leaf(p.sigma_z);
  ad::Val nz = tape.leaf(p.nu_z);
  Rng rng(seed);
  return model::ciwae_core(tape, v, sz, nz, r, k, rng, p.matched).val().value();
}

double flat_eval(model::Weights& w, const std::vector<double>& x, const ModelConfig& cfg,
                 const data::DayWindows& win, const Tensor& r,
                 const model::DropoutMasks& drop) {
  std::size_t pos = 0;
  for (Tensor& v : w.values)
    for (double& d : v.data()) d = x[pos++];
  ad::Tape tape;
  model::Lifted lifted = model::lift(tape, w);
  Rng rng(424242);
  return model::ciwae_loss(tape, lifted, cfg, win, r, drop, rng).val().value();
}

}  // namespace

TEST_CASE("day parameters keep their contracted shapes and ranges", "[model]") {
  for (Arch arch : {Arch::attention, Arch::recurrent}) {
    for (std::uint64_t seed : {3u, 4u, 5u}) {
      ModelConfig cfg = tiny_config(arch);
      cfg.seed = seed;
      model::Weights w = model::init_weights(cfg);
      // large inputs must not push sigma or nu out of their ranges
      const double scale = (seed == 5) ? 100.0 : 1.0;
      data::DayWindows win = noise_windows(7, cfg.lookback, cfg.channels, cfg.d_static,
                                           900 + seed, scale);
      model::DayParams p = model::embed_day_eval(w, cfg, win);
      REQUIRE(p.alpha.shape() == Shape{7});
      REQUIRE(p.b.shape() == (Shape{7, cfg.f}));
      for (std::size_t i = 0; i < 7; ++i) {
        REQUIRE(p.sigma(i) > 0.0);
        REQUIRE(p.nu(i) > 4.0);
        REQUIRE(std::isfinite(p.alpha(i)));
      }
      fm::FactorParams fp = model::day_factor_params(w, cfg, win);
      REQUIRE(fp.sigma_z.numel() == cfg.f);
      for (std::size_t q = 0; q < cfg.f; ++q) REQUIRE(fp.nu_z(q) > 4.0);
    }
  }
}

TEST_CASE("initial head biases land near unit scale and ten dof", "[model]") {
  ModelConfig cfg = tiny_config(Arch::attention);
  model::Weights w = model::init_weights(cfg);
  REQUIRE(special::softplus(w.get("head.sigma.b")(0)) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(4.0 + special::softplus(w.get("head.nu.b")(0)) == Catch::Approx(10.0).margin(1e-12));
  REQUIRE(model::prior_sigma_z(w)(0) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(model::prior_nu_z(w)(0) == Catch::Approx(10.0).margin(1e-12));
}

TEST_CASE("evaluation is a pure function of weights and inputs", "[model]") {
  for (Arch arch : {Arch::attention, Arch::recurrent}) {
    ModelConfig cfg = tiny_config(arch, 0.3);  // dropout must be inert at eval
    model::Weights w = model::init_weights(cfg);
    data::DayWindows win = noise_windows(5, cfg.lookback, cfg.channels, cfg.d_static, 77);
    model::DayParams a = model::embed_day_eval(w, cfg, win);
    model::DayParams b = model::embed_day_eval(w, cfg, win);
    REQUIRE(oracle::max_abs_diff(a.alpha.data(), b.alpha.data()) == 0.0);
    REQUIRE(oracle::max_abs_diff(a.b.data(), b.b.data()) == 0.0);
    REQUIRE(oracle::max_abs_diff(a.sigma.data(), b.sigma.data()) == 0.0);
    REQUIRE(oracle::max_abs_diff(a.nu.data(), b.nu.data()) == 0.0);

    Rng r1(5), r2(5);
    Tensor s1 = model::sample_day(w, cfg, win, 50, r1);
    Tensor s2 = model::sample_day(w, cfg, win, 50, r2);
    REQUIRE(oracle::max_abs_diff(s1.data(), s2.data()) == 0.0);
  }
}

TEST_CASE("reordering the cross-section reorders the outputs", "[model]") {
  const std::vector<std::size_t> perm{4, 1, 3, 0, 2, 5};
  for (Arch arch : {Arch::attention, Arch::recurrent}) {
    ModelConfig cfg = tiny_config(arch);
    model::Weights w = model::init_weights(cfg);
    data::DayWindows win = noise_windows(perm.size(), cfg.lookback, cfg.channels,
                                         cfg.d_static, 31);
    data::DayWindows shuffled = permute_windows(win, perm);
    model::DayParams a = model::embed_day_eval(w, cfg, win);
    model::DayParams b = model::embed_day_eval(w, cfg, shuffled);
    for (std::size_t n = 0; n < perm.size(); ++n) {
      REQUIRE(b.alpha(n) == a.alpha(perm[n]));
      REQUIRE(b.sigma(n) == a.sigma(perm[n]));
      REQUIRE(b.nu(n) == a.nu(perm[n]));
      for (std::size_t q = 0; q < cfg.f; ++q) REQUIRE(b.b(n, q) == a.b(perm[n], q));
    }
  }
}

TEST_CASE("shared dropout masks preserve the reordering property", "[model]") {
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  ModelConfig cfg = tiny_config(Arch::attention, 0.4);
  model::Weights w = model::init_weights(cfg);
  Rng mask_rng(99);
  model::DropoutMasks drop = model::draw_dropout(cfg, mask_rng);
  data::DayWindows win = noise_windows(perm.size(), cfg.lookback, cfg.channels, cfg.d_static, 13);
  data::DayWindows shuffled = permute_windows(win, perm);

  ad::Tape t1, t2;
  model::Lifted l1 = model::lift(t1, w, false);
  model::Lifted l2 = model::lift(t2, w, false);
  model::DayParamsVal a = model::embed_day(t1, l1, cfg, win, drop);
  model::DayParamsVal b = model::embed_day(t2, l2, cfg, shuffled, drop);
  for (std::size_t n = 0; n < perm.size(); ++n) {
    REQUIRE(b.alpha.val()(n, 0) == a.alpha.val()(perm[n], 0));
    REQUIRE(b.sigma.val()(n, 0) == a.sigma.val()(perm[n], 0));
    for (std::size_t q = 0; q < cfg.f; ++q) REQUIRE(b.b.val()(n, q) == a.b.val()(perm[n], q));
  }
}

TEST_CASE("matched variances on tape equal the plain ones", "[model]") {
  fm::FactorParams p = random_params(9, 3, 808, 5.0, 3);
  ad::Tape tape;
  ad::Val sig = tape.leaf(p.sigma.reshaped({9, 1}));
  ad::Val nu = tape.leaf(p.nu.reshaped({9, 1}));
  Tensor got = model::variance_on_tape(sig, nu, true).val();
  Tensor want = fm::variance_vector(p.sigma, p.nu, true);
  REQUIRE(oracle::max_abs_diff(got.data(), want.data()) < 1e-15);

  Tensor raw = model::variance_on_tape(sig, nu, false).val();
  for (std::size_t i = 0; i < 9; ++i)
    REQUIRE(raw(i) == Catch::Approx(p.sigma(i) * p.sigma(i)).epsilon(1e-15));
}

TEST_CASE("columnwise log likelihood matches the scalar density", "[model]") {
  const std::size_t n = 8, k = 5;
  fm::FactorParams p = random_params(n, 2, 515, 5.0, 4);
  Rng rng(6);
  Tensor x = Tensor::randn({n, k}, rng);
  ad::Tape tape;
  Tensor mu = Tensor::randn({n, k}, rng, 0.2);
  ad::Val ll = model::t_loglik_colsums(
      tape.constant(x), tape.constant(mu),
      ad::broadcast_last(tape.constant(p.sigma.reshaped({n, 1})), k),
      ad::broadcast_last(tape.constant(p.nu.reshaped({n, 1})), k), k);
  for (std::size_t j = 0; j < k; ++j) {
    double want = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      want += dist::t_logpdf(x(i, j), mu(i, j), p.sigma(i), p.nu(i));
    REQUIRE(ll.val()(j) == Catch::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("a unit scalar observation halves the prior on the factor", "[model]") {
  // B = 1, unit noise and prior, r - alpha = 1: precision 2, mean one half
  fm::FactorParams p;
  p.alpha = Tensor::vector({0.0});
  p.b = Tensor::from({1, 1}, {1.0});
  p.sigma = Tensor::vector({1.0});
  p.nu = Tensor::vector({dist::kNuCap});
  p.sigma_z = Tensor::vector({1.0});
  p.nu_z = Tensor::vector({dist::kNuCap});
  Tensor r = Tensor::vector({1.0});

  fm::PosteriorChol post = fm::posterior_chol(p, r);
  REQUIRE(post.mean(0) == Catch::Approx(0.5).margin(1e-15));
  REQUIRE(post.covariance()(0, 0) == Catch::Approx(0.5).margin(1e-15));

  ad::Tape tape;
  model::DayParamsVal v = lift_params(tape, p);
  model::PosteriorVal tp = model::posterior_on_tape(
      tape, v.b, model::variance_on_tape(v.sigma, v.nu, true),
      model::variance_on_tape(tape.leaf(p.sigma_z.reshaped({1, 1})),
                              tape.leaf(p.nu_z.reshaped({1, 1})), true),
      ad::sub(tape.constant(r.reshaped({1, 1})), v.alpha));
  REQUIRE(tp.mean.val()(0) == Catch::Approx(0.5).margin(1e-15));
  REQUIRE(tp.lp.val()(0, 0) == Catch::Approx(std::sqrt(2.0)).margin(1e-15));
}

TEST_CASE("tape posterior solves the same normal equations", "[model]") {
  const std::size_t n = 14, f = 3;
  fm::FactorParams p = random_params(n, f, 2024, 5.0, 5);
  Rng rng(8);
  Tensor r = Tensor::randn({n}, rng);
  fm::PosteriorChol want = fm::posterior_chol(p, r);

  ad::Tape tape;
  model::DayParamsVal v = lift_params(tape, p);
  model::PosteriorVal got = model::posterior_on_tape(
      tape, v.b, model::variance_on_tape(v.sigma, v.nu, true),
      model::variance_on_tape(tape.leaf(p.sigma_z.reshaped({f, 1})),
                              tape.leaf(p.nu_z.reshaped({f, 1})), true),
      ad::sub(tape.constant(r.reshaped({n, 1})), v.alpha));
  for (std::size_t q = 0; q < f; ++q) {
    REQUIRE(got.mean.val()(q, 0) == Catch::Approx(want.mean(q)).margin(1e-12));
    for (std::size_t c = 0; c <= q; ++c)
      REQUIRE(got.lp.val()(q, c) == Catch::Approx(want.lp(q, c)).margin(1e-12));
  }
}

TEST_CASE("tape and plain importance estimates coincide draw for draw", "[model]") {
  const std::size_t n = 10, f = 2, k = 7;
  fm::FactorParams p = random_params(n, f, 4411, 5.0, 3);
  Rng rng(55);
  Tensor r = Tensor::randn({n}, rng, 0.8);
  const double got = tape_ciwae(p, r, k, 1234);
  Rng plain(1234);
  const double want = fm::iwae_nll(p, r, k, plain);
  REQUIRE(got == Catch::Approx(want).epsilon(1e-11));
}

TEST_CASE("the importance weights collapse in the Gaussian limit", "[model]") {
  const std::size_t n = 12, f = 3;
  fm::FactorParams p = random_params(n, f, 7007);
  for (std::size_t i = 0; i < n; ++i) p.nu(i) = dist::kNuCap;
  for (std::size_t q = 0; q < f; ++q) p.nu_z(q) = dist::kNuCap;
  Rng rng(9);
  Tensor r = Tensor::randn({n}, rng);
  const double exact = fm::gaussian_joint_nll(p, r);
  const double one = tape_ciwae(p, r, 1, 5);
  const double twenty = tape_ciwae(p, r, 20, 6);
  REQUIRE(std::abs(one - exact) < 1e-9);
  REQUIRE(std::abs(twenty - exact) < 1e-9);
  REQUIRE(std::abs(twenty - one) < 1e-9);
}

TEST_CASE("more importance draws tighten the bound", "[model]") {
  const std::size_t n = 8, f = 2, seeds = 600;
  fm::FactorParams p = random_params(n, f, 31337);
  Rng gen(17);
  Tensor r = Tensor::randn({n}, gen, 0.8);
  double s1 = 0.0, s20 = 0.0, sq = 0.0;
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng a = Rng::substream(1000 + s, "one");
    Rng b = Rng::substream(1000 + s, "twenty");
    const double n1 = fm::iwae_nll(p, r, 1, a);
    const double n20 = fm::iwae_nll(p, r, 20, b);
    const double d = n1 - n20;
    s1 += n1;
    s20 += n20;
    sq += d * d;
  }
  const double gap = (s1 - s20) / seeds;
  const double se = std::sqrt((sq / seeds - gap * gap) / seeds);
  REQUIRE(gap > 0.0);
  REQUIRE(gap > 3.0 * se);
}

TEST_CASE("loss gradients match finite differences", "[model]") {
  synth::TruthConfig tc;
  tc.n = 4;
  tc.f = 2;
  tc.n_sectors = 2;
  tc.seed = 5;
  synth::SyntheticTruth truth = synth::make_truth(tc);
  synth::SyntheticPanel sp = synth::generate(truth, 8);

  struct Spec {
    Arch arch;
    double dropout;
  };
  for (Spec s : {Spec{Arch::attention, 0.25}, Spec{Arch::recurrent, 0.0},
                 Spec{Arch::recurrent, 0.25}}) {
    ModelConfig cfg = tiny_config(s.arch, s.dropout);
    cfg.channels = 2 + sp.features.ts_width();
    cfg.d_static = sp.features.static_width();
    cfg.k_iwae = 2;
    model::Weights w = model::init_weights(cfg);

    const std::size_t t = cfg.lookback + 1;
    std::vector<std::size_t> both = data::members_at_both(sp.panel, t);
    data::DayWindows win = data::make_windows(sp.panel, sp.features, t, cfg.lookback, &both);
    Tensor r = data::gather_returns(sp.panel, t + 1, both);

    Rng mask_rng(3);
    model::DropoutMasks drop =
        s.dropout > 0.0 ? model::draw_dropout(cfg, mask_rng) : model::no_dropout();

    std::vector<double> x0;
    for (const Tensor& v : w.values)
      for (double d : v.data()) x0.push_back(d);

    ad::Tape tape;
    model::Lifted lifted = model::lift(tape, w);
    Rng loss_rng(424242);
    ad::Val loss = model::ciwae_loss(tape, lifted, cfg, win, r, drop, loss_rng);
    tape.backward(loss);
    std::vector<double> got;
    for (ad::Val v : lifted.vals) {
      const Tensor& g = tape.grad(v);
      got.insert(got.end(), g.data().begin(), g.data().end());
    }

    std::vector<double> want = oracle::finite_diff5(
        [&](const std::vector<double>& x) { return flat_eval(w, x, cfg, win, r, drop); }, x0,
        1e-3);
    REQUIRE(oracle::grad_rel_err(got, want) < 1e-4);
  }
}

TEST_CASE("forecast moments describe the sampler", "[model]") {
  ModelConfig cfg = tiny_config(Arch::attention);
  cfg.f = 3;
  cfg.hidden = 16;
  cfg.heads = 4;
  model::Weights w = model::init_weights(cfg);
  data::DayWindows win = noise_windows(12, cfg.lookback, cfg.channels, cfg.d_static, 606);

  const std::uint64_t before = model::embed_counter().load();
  MomentForecast fc = model::forecast_day(w, cfg, win);
  REQUIRE(model::embed_counter().load() == before + 1);

  // systematic part has rank at most F
  Tensor systematic = fc.cov;
  fm::FactorParams p = model::day_factor_params(w, cfg, win);
  Tensor varx = fm::variance_vector(p.sigma, p.nu, p.matched);
  for (std::size_t i = 0; i < 12; ++i) systematic(i, i) -= varx(i);
  linalg::EigResult eig = linalg::sym_eig(systematic);
  for (std::size_t i = 0; i + cfg.f < 12; ++i)
    REQUIRE(std::abs(eig.values(i)) < 1e-10 * std::abs(eig.values(11)));

  Rng rng(2);
  const std::size_t draws = 200000;
  Tensor samples = model::sample_day(w, cfg, win, draws, rng);
  Tensor mean({12});
  for (std::size_t s = 0; s < draws; ++s)
    for (std::size_t i = 0; i < 12; ++i) mean(i) += samples(s, i);
  for (std::size_t i = 0; i < 12; ++i) mean(i) /= draws;
  Tensor cov({12, 12});
  for (std::size_t s = 0; s < draws; ++s)
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j)
        cov(i, j) += (samples(s, i) - mean(i)) * (samples(s, j) - mean(j));
  for (double& v : cov.data()) v /= draws - 1;

  REQUIRE(oracle::rel_frobenius(cov, fc.cov) < 0.02);
  for (std::size_t i = 0; i < 12; ++i) {
    const double se = std::sqrt(fc.cov(i, i) / draws);
    REQUIRE(std::abs(mean(i) - fc.mean(i)) < 5.0 * se);
  }
}

TEST_CASE("independent and joint metrics agree when factors vanish", "[model]") {
  const std::size_t n = 10;
  fm::FactorParams p = random_params(n, 2, 888);
  p.b = Tensor({n, 2});
  Rng gen(4);
  Tensor r = Tensor::randn({n}, gen, 0.9);
  Rng rng(12);
  model::DayNll m = model::nll_metrics_day(p, r, rng, 100, 20000);
  double direct = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    direct += dist::t_logpdf(r(i), p.alpha(i), p.sigma(i), p.nu(i));
  direct = -direct / static_cast<double>(n);
  REQUIRE(m.joint == Catch::Approx(direct).margin(1e-14));
  REQUIRE(std::abs(m.independent - m.joint) < 0.01);
}

TEST_CASE("metric draw counts are converged at the defaults", "[model]") {
  synth::TruthConfig tc;
  tc.n = 16;
  tc.f = 3;
  tc.n_sectors = 4;
  tc.seed = 21;
  synth::SyntheticTruth truth = synth::make_truth(tc);
  const fm::FactorParams p = truth.factor_params();
  double worst_joint = 0.0, worst_vs_true = 0.0;
  for (std::size_t day = 0; day < 12; ++day) {
    Rng sample_rng = Rng::substream(500, "day", day);
    Tensor r = fm::sample_returns(p, 1, sample_rng).reshaped({16});
    Rng a = Rng::substream(600, "a", day);
    Rng b = Rng::substream(700, "b", day);
    Rng c = Rng::substream(800, "c", day);
    const double j100 = fm::iwae_nll(p, r, 100, a);
    const double j1000 = fm::iwae_nll(p, r, 1000, b);
    const double jtrue = fm::iwae_nll(p, r, 10000, c);
    worst_joint = std::max(worst_joint, std::abs(j100 - j1000));
    worst_vs_true = std::max(worst_vs_true, std::abs(j100 - jtrue));
  }
  REQUIRE(worst_joint < 0.01);
  REQUIRE(worst_vs_true < 0.02);
}

TEST_CASE("rescaling factors and prior together changes nothing", "[model]") {
  const std::size_t n = 10, f = 3;
  fm::FactorParams p = random_params(n, f, 99);
  fm::FactorParams q = p;
  const double c[3] = {2.0, 0.5, 3.0};
  for (std::size_t a = 0; a < f; ++a) {
    for (std::size_t i = 0; i < n; ++i) q.b(i, a) = p.b(i, a) * c[a];
    q.sigma_z(a) = p.sigma_z(a) / c[a];
  }
  MomentForecast mp = fm::moments(p);
  MomentForecast mq = fm::moments(q);
  REQUIRE(oracle::rel_frobenius(mq.cov, mp.cov) < 1e-14);

  for (std::size_t i = 0; i < n; ++i) p.nu(i) = q.nu(i) = dist::kNuCap;
  for (std::size_t a = 0; a < f; ++a) p.nu_z(a) = q.nu_z(a) = dist::kNuCap;
  Rng gen(61);
  Tensor r = Tensor::randn({n}, gen);
  REQUIRE(fm::gaussian_joint_nll(p, r) == Catch::Approx(fm::gaussian_joint_nll(q, r)).epsilon(1e-12));
}
