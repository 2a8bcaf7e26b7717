#include <catch2/catch_amalgamated.hpp>

#include "neuralfactors/linalg.hpp"
#include "neuralfactors/tensor.hpp"
#include "oracles.hpp"

using namespace nf;
using Catch::Approx;

TEST_CASE("broadcast rules: same, suffix, scalar; anything else rejected", "[tensor]") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row = Tensor::from({3}, {10, 20, 30});
  Tensor s = Tensor::scalar(2.0);

  Tensor r1 = add(a, row);
  CHECK(r1(1, 2) == 36.0);
  CHECK(r1(0, 0) == 11.0);

  Tensor r2 = mul(a, s);
  CHECK(r2(1, 1) == 10.0);

  Tensor r3 = sub(row, a);  // smaller-first still broadcasts, result is (2,3)
  CHECK(r3.shape() == Shape{2, 3});
  CHECK(r3(0, 0) == 9.0);

  Tensor bad = Tensor::from({2}, {1, 2});
  CHECK_THROWS_AS(add(a, bad), ContractError);  // (2) is not a suffix of (2,3)
}

TEST_CASE("reduce_to_shape sums over broadcast repeats", "[tensor]") {
  Tensor g = Tensor::from({2, 3}, {1, 1, 1, 2, 2, 2});
  Tensor r = reduce_to_shape(g, {3});
  CHECK(r(0) == 3.0);
  CHECK(r(2) == 3.0);
  Tensor rs = reduce_to_shape(g, {});
  CHECK(rs.value() == 9.0);
}

TEST_CASE("matmul against hand-computed values and transpose kernels", "[tensor]") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  CHECK(c(0, 0) == 58.0);
  CHECK(c(0, 1) == 64.0);
  CHECK(c(1, 0) == 139.0);
  CHECK(c(1, 1) == 154.0);

  // A^T B and A B^T agree with the explicit transpose route
  Tensor at = transpose(a);
  Tensor tn = matmul_tn(a, c);       // (3,2)
  Tensor tn_ref = matmul(at, c);
  for (std::size_t i = 0; i < tn.numel(); ++i) CHECK(tn(i) == Approx(tn_ref(i)));

  Tensor nt = matmul_nt(a, transpose(b));  // b^T is (2,3); a x (b^T)^T = a b
  for (std::size_t i = 0; i < nt.numel(); ++i) CHECK(nt(i) == Approx(c(i)));

  CHECK_THROWS_AS(matmul(a, a), ContractError);
}

TEST_CASE("bmm matches per-batch matmul, both orientations", "[tensor]") {
  Rng rng(7);
  Tensor a = Tensor::randn({4, 3, 5}, rng);
  Tensor b = Tensor::randn({4, 5, 2}, rng);
  Tensor c = bmm(a, b);
  for (std::size_t q = 0; q < 4; ++q) {
    Tensor aq({3, 5}), bq({5, 2});
    for (std::size_t i = 0; i < 15; ++i) aq(i) = a.data()[q * 15 + i];
    for (std::size_t i = 0; i < 10; ++i) bq(i) = b.data()[q * 10 + i];
    Tensor cq = matmul(aq, bq);
    for (std::size_t i = 0; i < 6; ++i) CHECK(c.data()[q * 6 + i] == Approx(cq(i)));
  }
  // transpose_b: a (4,3,5) x b2 (4,2,5)^T
  Tensor b2 = Tensor::randn({4, 2, 5}, rng);
  Tensor c2 = bmm(a, b2, true);
  for (std::size_t q = 0; q < 4; ++q)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < 5; ++p) s += a.at3(q, i, p) * b2.at3(q, j, p);
        CHECK(c2.at3(q, i, j) == Approx(s));
      }
  // bmm_tn: a^T x g
  Tensor g = Tensor::randn({4, 3, 2}, rng);
  Tensor tn = bmm_tn(a, g);
  for (std::size_t q = 0; q < 4; ++q)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < 3; ++p) s += a.at3(q, p, i) * g.at3(q, p, j);
        CHECK(tn.at3(q, i, j) == Approx(s));
      }
}

TEST_CASE("cholesky of [[2,1],[1,2]] reproduces frozen factor", "[tensor]") {
  Tensor a = Tensor::from({2, 2}, {2, 1, 1, 2});
  Tensor l = linalg::cholesky(a);
  CHECK(l(0, 0) == Approx(oracle::kChol2x2_00).epsilon(1e-14));
  CHECK(l(1, 0) == Approx(oracle::kChol2x2_10).epsilon(1e-14));
  CHECK(l(1, 1) == Approx(oracle::kChol2x2_11).epsilon(1e-14));
  CHECK(l(0, 1) == 0.0);
}

TEST_CASE("cholesky reconstructs and round-trips a random SPD matrix", "[tensor]") {
  Rng rng(11);
  const std::size_t n = 12;
  Tensor m = Tensor::randn({n, n}, rng);
  Tensor spd = matmul_nt(m, m);
  for (std::size_t i = 0; i < n; ++i) spd(i, i) += 0.5;
  Tensor l = linalg::cholesky(spd);
  Tensor back = matmul_nt(l, l);
  CHECK(oracle::rel_frobenius(back, spd) < 1e-12);

  // solve should invert multiply
  Tensor x = Tensor::randn({n}, rng);
  Tensor b = matmul(spd, x.reshaped({n, 1}));
  Tensor got = linalg::chol_solve(l, b);
  for (std::size_t i = 0; i < n; ++i) CHECK(got(i) == Approx(x(i)).margin(1e-9));
}

TEST_CASE("cholesky failure reports the pivot", "[tensor]") {
  Tensor a = Tensor::from({3, 3}, {1, 0, 0, 0, -1, 0, 0, 0, 1});
  try {
    linalg::cholesky(a);
    FAIL("expected DecompositionError");
  } catch (const DecompositionError& e) {
    CHECK(e.pivot() == 1);
  }
}

TEST_CASE("trisolve both orientations against direct multiply", "[tensor]") {
  Rng rng(3);
  const std::size_t n = 6;
  Tensor m = Tensor::randn({n, n}, rng);
  Tensor spd = matmul_nt(m, m);
  for (std::size_t i = 0; i < n; ++i) spd(i, i) += 1.0;
  Tensor l = linalg::cholesky(spd);
  Tensor b = Tensor::randn({n, 2}, rng);
  Tensor x1 = linalg::trisolve(l, b, false);
  Tensor lx = matmul(l, x1);
  CHECK(oracle::rel_frobenius(lx, b) < 1e-12);
  Tensor x2 = linalg::trisolve(l, b, true);
  Tensor ltx = matmul_tn(l, x2);
  CHECK(oracle::rel_frobenius(ltx, b) < 1e-12);
}

TEST_CASE("sym_eig: ascending ordering, orthonormal vectors, reconstruction", "[tensor]") {
  Rng rng(5);
  const std::size_t n = 16;
  Tensor m = Tensor::randn({n, n}, rng);
  Tensor a = matmul_nt(m, m);
  linalg::EigResult e = linalg::sym_eig(a);
  for (std::size_t i = 1; i < n; ++i) CHECK(e.values(i) >= e.values(i - 1));
  // V^T V = I
  Tensor vtv = matmul_tn(e.vectors, e.vectors);
  CHECK(oracle::rel_frobenius(vtv, Tensor::eye(n)) < 1e-10);
  // A V = V diag(lambda)
  Tensor av = matmul(a, e.vectors);
  Tensor vl = e.vectors;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) vl(i, j) *= e.values(j);
  double scale = 0.0;
  for (double v : a.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < av.numel(); ++i)
    CHECK(std::abs(av(i) - vl(i)) < 1e-8 * std::max(1.0, scale));
}

TEST_CASE("psd_inverse_sqrt whitens its input", "[tensor]") {
  Rng rng(9);
  const std::size_t n = 8;
  Tensor m = Tensor::randn({n, n}, rng);
  Tensor a = matmul_nt(m, m);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += 0.1;
  Tensor w = linalg::psd_inverse_sqrt(a);
  Tensor t1 = matmul(w, matmul(a, w));
  CHECK(oracle::rel_frobenius(t1, Tensor::eye(n)) < 1e-9);
}

TEST_CASE("deterministic results from equal seeds", "[tensor]") {
  Rng a(123), b(123);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.normal() == b.normal());
  Rng c(123), d(124);
  bool differ = false;
  for (int i = 0; i < 10; ++i) differ = differ || (c.uniform() != d.uniform());
  CHECK(differ);
}

TEST_CASE("gamma sampler matches moments", "[tensor]") {
  Rng rng(77);
  const double shape = 3.5;
  double s1 = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.gamma(shape);
    s1 += x;
    s2 += x * x;
  }
  const double mean = s1 / n, var = s2 / n - mean * mean;
  CHECK(mean == Approx(shape).epsilon(0.02));
  CHECK(var == Approx(shape).epsilon(0.05));
}
