// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "sphere/spectral.hpp"
#include "test_util.hpp"

using namespace sphere;
using namespace sphere::spectral;

namespace {

SpsdMatrix diag3(double a, double b, double c) {
  Vector d(3);
  d << a, b, c;
  return SpsdMatrix::diag(d);
}

SpsdMatrix diag2(double a, double b) {
  Vector d(2);
  d << a, b;
  return SpsdMatrix::diag(d);
}

}  // namespace

TEST_CASE("effective_rank on frozen spectra") {
  // Equal nonzero eigenvalues saturate r_e = rank.
  CHECK(effective_rank(diag2(2, 2)) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(effective_rank(diag2(1, 0)) == doctest::Approx(1.0).epsilon(1e-12));
  // Oracle: p = (1/4, 1/4, 1/2), r_e = exp(H(p)) = 2^{3/2}.
  double expect = testutil::entropy_effrank({1, 1, 2});
  CHECK(expect == doctest::Approx(2.828427).epsilon(1e-6));
  CHECK(effective_rank(diag3(1, 1, 2)) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("effective_rank rejects the zero spectrum") {
  CHECK_THROWS_AS(effective_rank(SpsdMatrix(Matrix::Zero(2, 2))), Error);
}

TEST_CASE("condition_number basics") {
  CHECK(condition_number(SpsdMatrix::identity(4)) == doctest::Approx(1.0));
  CHECK(condition_number(diag2(1, 3)) == doctest::Approx(3.0));
  CHECK(condition_number(diag2(1, 0)) == kInf);
  CHECK(condition_number(SpsdMatrix(Matrix::Zero(3, 3))) == kInf);
}

TEST_CASE("ridge_shift") {
  SpsdMatrix r = ridge_shift(diag2(1, 0), 0.5);
  CHECK(r.entries()(0, 0) == doctest::Approx(1.5));
  CHECK(r.entries()(1, 1) == doctest::Approx(0.5));
  SpsdMatrix z = ridge_shift(SpsdMatrix(Matrix::Zero(2, 2)), 1.0);
  CHECK((z.entries() - Matrix::Identity(2, 2)).norm() == doctest::Approx(0.0));
  CHECK_THROWS_AS(ridge_shift(diag2(2, 3), 0.0), Error);
}

TEST_CASE("kronecker effective rank and condition number multiply") {
  SpsdMatrix k = kronecker(diag3(1, 1, 2), diag2(3, 3));
  CHECK(k.dim() == 6);
  // Oracle: product of per-factor entropic ranks.
  double expect = testutil::entropy_effrank({1, 1, 2}) * testutil::entropy_effrank({3, 3});
  CHECK(expect == doctest::Approx(5.656854).epsilon(1e-6));
  CHECK(effective_rank(k) == doctest::Approx(expect).epsilon(1e-9));

  SpsdMatrix i6 = kronecker(SpsdMatrix::identity(2), SpsdMatrix::identity(3));
  CHECK((i6.entries() - Matrix::Identity(6, 6)).norm() == doctest::Approx(0.0));
  CHECK(effective_rank(i6) == doctest::Approx(6.0).epsilon(1e-12));

  CHECK(condition_number(kronecker(diag2(1, 2), diag2(1, 2))) == doctest::Approx(4.0));
}

TEST_CASE("kronecker multiplicativity on random SPSD pairs") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    int na = 2 + static_cast<int>(rng() % 5);
    int nb = 2 + static_cast<int>(rng() % 5);
    SpsdMatrix a(random_spsd(rng, na));
    SpsdMatrix b(random_spsd(rng, nb));
    double lhs = effective_rank(kronecker(a, b));
    double rhs = effective_rank(a) * effective_rank(b);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
  }
}

TEST_CASE("block_direct_sum assembles spectra") {
  std::vector<SpsdMatrix> blocks = {diag2(1, 1), diag2(2, 2)};
  SpsdMatrix s = block_direct_sum(blocks);
  CHECK(s.dim() == 4);
  Vector expect(4);
  expect << 1, 1, 2, 2;
  CHECK((s.entries() - Matrix(expect.asDiagonal())).norm() == doctest::Approx(0.0));

  SpsdMatrix one = block_direct_sum({SpsdMatrix::identity(2)});
  CHECK((one.entries() - Matrix::Identity(2, 2)).norm() == doctest::Approx(0.0));

  // Eigenvalue multiset union: {1,3} + {2} -> {1,2,3}.
  Vector d2(2);
  d2 << 1, 3;
  Vector d1(1);
  d1 << 2;
  auto eigs = testutil::raw_eigs(block_direct_sum({SpsdMatrix::diag(d2), SpsdMatrix::diag(d1)}).entries());
  CHECK(eigs[0] == doctest::Approx(1.0));
  CHECK(eigs[1] == doctest::Approx(2.0));
  CHECK(eigs[2] == doctest::Approx(3.0));
}

TEST_CASE("block_effrank_mixture equals direct effective rank") {
  // alpha = (1/3, 2/3); cross-checked against direct r_e of diag(1,1,2,2).
  std::vector<SpsdMatrix> blocks = {diag2(1, 1), diag2(2, 2)};
  double mix = block_effrank_mixture(blocks);
  CHECK(mix == doctest::Approx(3.779763).epsilon(1e-6));
  CHECK(mix == doctest::Approx(effective_rank(block_direct_sum(blocks))).epsilon(1e-9));

  CHECK(block_effrank_mixture({SpsdMatrix::identity(3)}) == doctest::Approx(3.0).epsilon(1e-12));

  Vector one(1);
  one << 1;
  CHECK(block_effrank_mixture({SpsdMatrix::diag(one), SpsdMatrix::diag(one)}) ==
        doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("block mixture identity on random block lists") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    int nblocks = 1 + static_cast<int>(rng() % 4);
    std::vector<SpsdMatrix> blocks;
    for (int b = 0; b < nblocks; ++b)
      blocks.emplace_back(random_spsd(rng, 1 + static_cast<int>(rng() % 5)));
    double mix = block_effrank_mixture(blocks);
    double direct = effective_rank(block_direct_sum(blocks));
    CHECK(mix == doctest::Approx(direct).epsilon(1e-9));
  }
}

TEST_CASE("spectral_contraction_step") {
  SpsdMatrix m = diag2(1, 3);
  SpsdMatrix half = spectral_contraction_step(m, 0.5);
  CHECK(half.entries()(0, 0) == doctest::Approx(1.5));
  CHECK(half.entries()(1, 1) == doctest::Approx(2.5));
  CHECK(condition_number(half) == doctest::Approx(5.0 / 3.0));

  SpsdMatrix fixed = spectral_contraction_step(SpsdMatrix(2.5 * Matrix::Identity(3, 3)), 0.7);
  CHECK((fixed.entries() - 2.5 * Matrix::Identity(3, 3)).norm() == doctest::Approx(0.0));

  SpsdMatrix full = spectral_contraction_step(m, 1.0);
  CHECK((full.entries() - 2.0 * Matrix::Identity(2, 2)).norm() == doctest::Approx(0.0));
}

TEST_CASE("spectral contraction properties on random SPD matrices") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + static_cast<int>(rng() % 6);
    SpsdMatrix m(random_spd(rng, n, 0.05));
    double beta = (trial % 3 == 0) ? 0.1 : (trial % 3 == 1) ? 0.5 : 1.0;
    SpsdMatrix next = spectral_contraction_step(m, beta);

    CHECK(next.trace() == doctest::Approx(m.trace()).epsilon(1e-12));
    CHECK(condition_number(next) <= condition_number(m) + 1e-12);

    // Every eigenvalue gap to the mean shrinks by exactly (1 - beta):
    // eigenvectors are unchanged, so compare sorted spectra.
    double mean = m.trace() / n;
    Vector before = m.spectrum().values();
    Vector after = next.spectrum().values();
    for (int i = 0; i < n; ++i)
      CHECK(after(i) - mean == doctest::Approx((1.0 - beta) * (before(i) - mean)).epsilon(1e-10));
  }
}

TEST_CASE("kronecker preserves kappa monotonicity") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    int m = 2 + static_cast<int>(rng() % 4);
    int n = 2 + static_cast<int>(rng() % 4);
    SpsdMatrix a(random_spd(rng, m, 0.05));
    SpsdMatrix b(random_spd(rng, n, 0.05));
    SpsdMatrix a2 = spectral_contraction_step(a, 0.3);  // kappa(a2) <= kappa(a)
    REQUIRE(condition_number(a2) <= condition_number(a) + 1e-12);
    CHECK(condition_number(kronecker(a2, b)) <= condition_number(kronecker(a, b)) + 1e-9);
  }
}

TEST_CASE("khatri_rao_block") {
  Rng rng(23);
  SpsdMatrix a(random_spsd(rng, 4));
  SpsdMatrix g(random_spsd(rng, 4));
  BlockPartition p1{{4}};
  // Single-block degeneration equals the plain Kronecker product.
  SpsdMatrix kr = khatri_rao_block(a, g, p1, p1);
  CHECK((kr.entries() - kronecker(a, g).entries()).cwiseAbs().maxCoeff() == doctest::Approx(0.0));

  // Two-block diagonal inputs with zero cross blocks: block-diagonal of
  // per-block Kroneckers.
  Matrix ad = Matrix::Zero(4, 4), gd = Matrix::Zero(4, 4);
  ad.block(0, 0, 2, 2) = random_spsd(rng, 2);
  ad.block(2, 2, 2, 2) = random_spsd(rng, 2);
  gd.block(0, 0, 2, 2) = random_spsd(rng, 2);
  gd.block(2, 2, 2, 2) = random_spsd(rng, 2);
  BlockPartition p2{{2, 2}};
  SpsdMatrix kr2 = khatri_rao_block(SpsdMatrix(ad), SpsdMatrix(gd), p2, p2);
  SpsdMatrix expect = block_direct_sum({kronecker(SpsdMatrix(ad.block(0, 0, 2, 2)), SpsdMatrix(gd.block(0, 0, 2, 2))),
                                        kronecker(SpsdMatrix(ad.block(2, 2, 2, 2)), SpsdMatrix(gd.block(2, 2, 2, 2)))});
  CHECK((kr2.entries() - expect.entries()).cwiseAbs().maxCoeff() == doctest::Approx(0.0).epsilon(1e-12));

  // Random pair: result symmetric within 1e-12 (construction validates this).
  SpsdMatrix kr3 = khatri_rao_block(SpsdMatrix(random_spsd(rng, 4)), SpsdMatrix(random_spsd(rng, 4)), p2, p2);
  CHECK((kr3.entries() - kr3.entries().transpose()).cwiseAbs().maxCoeff() <= 1e-12);

  BlockPartition bad{{2, 1, 1}};
  CHECK_THROWS_AS(khatri_rao_block(a, g, bad, p2), Error);
}

TEST_CASE("tracy_singh spectrum and selection") {
  Rng rng(29);
  BlockPartition p1{{3}};
  SpsdMatrix a(random_spsd(rng, 3));
  SpsdMatrix g(random_spsd(rng, 3));
  auto ts1 = tracy_singh(a, g, p1, p1);
  CHECK((ts1.product.entries() - kronecker(a, g).entries()).cwiseAbs().maxCoeff() ==
        doctest::Approx(0.0));
  CHECK(ts1.khatri_indices.size() == 9);

  BlockPartition p2{{1, 1}};
  for (int trial = 0; trial < 50; ++trial) {
    SpsdMatrix a2(random_spsd(rng, 2));
    SpsdMatrix g2(random_spsd(rng, 2));
    auto ts = tracy_singh(a2, g2, p2, p2);
    auto kron_eigs = testutil::raw_eigs(kronecker(a2, g2).entries());
    auto ts_eigs = testutil::raw_eigs(ts.product.entries());
    for (size_t i = 0; i < kron_eigs.size(); ++i)
      CHECK(ts_eigs[i] == doctest::Approx(kron_eigs[i]).epsilon(1e-8));

    // Principal-submatrix extraction reproduces the Khatri-Rao product.
    SpsdMatrix kr = khatri_rao_block(a2, g2, p2, p2);
    const auto& sel = ts.khatri_indices;
    for (size_t i = 0; i < sel.size(); ++i)
      for (size_t j = 0; j < sel.size(); ++j)
        CHECK(ts.product.entries()(sel[i], sel[j]) ==
              doctest::Approx(kr.entries()(i, j)).epsilon(1e-12));
  }

  SpsdMatrix big(random_spsd(rng, 9));
  CHECK_THROWS_AS(tracy_singh(big, big, BlockPartition{{9}}, BlockPartition{{9}}), Error);
}

TEST_CASE("interlacing_lower_bound on frozen instance") {
  Vector d(3);
  d << 1, 2, 4;
  auto res = interlacing_lower_bound(SpsdMatrix::diag(d), {0, 2});
  CHECK(res.bound == doctest::Approx(0.5).epsilon(1e-12));
  // Oracle: submatrix diag(1,4), p = (0.2, 0.8).
  CHECK(res.actual == doctest::Approx(testutil::entropy_effrank({1, 4})).epsilon(1e-12));
  CHECK(res.actual == doctest::Approx(1.6493849).epsilon(1e-6));
  CHECK(res.actual >= res.bound - 1e-9);
  CHECK_FALSE(res.equality);

  auto eq = interlacing_lower_bound(SpsdMatrix(2.0 * Matrix::Identity(3, 3)), {0, 1});
  CHECK(eq.bound == doctest::Approx(2.0));
  CHECK(eq.actual == doctest::Approx(2.0));
  CHECK(eq.equality);

  CHECK_THROWS_AS(interlacing_lower_bound(diag2(1, 0), {0}), Error);
}

TEST_CASE("interlacing bound over random SPD matrices and index subsets") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + static_cast<int>(rng() % 6);
    SpsdMatrix m(random_spd(rng, n, 0.05));
    std::vector<int> keep;
    for (int i = 0; i < n; ++i)
      if (rng() % 2 == 0) keep.push_back(i);
    if (keep.empty()) keep.push_back(static_cast<int>(rng() % n));
    auto res = interlacing_lower_bound(m, keep);
    CHECK(res.actual >= res.bound - 1e-9);
  }
  // Full index set: actual = r_e(M) >= dim / kappa(M).
  SpsdMatrix m(random_spd(rng, 5, 0.05));
  auto res = interlacing_lower_bound(m, {0, 1, 2, 3, 4});
  CHECK(res.actual == doctest::Approx(effective_rank(m)).epsilon(1e-12));
}

TEST_CASE("effrank_stability_bound") {
  SpsdMatrix k = diag2(1, 1);
  auto same = effrank_stability_bound(k, k);
  CHECK(same.epsilon == doctest::Approx(0.0));
  CHECK(same.bound == doctest::Approx(0.0));
  CHECK(same.actual_gap == doctest::Approx(0.0));

  auto near = effrank_stability_bound(diag2(1, 1), diag2(1, 1.1));
  CHECK(near.actual_gap <= near.bound + 1e-9);

  // n = 2 and eps > 1/2 leaves the validity region.
  auto far = effrank_stability_bound(diag2(1, 1), diag2(100, 1));
  CHECK(far.epsilon > 0.5);
  CHECK(far.bound == kInf);

  CHECK_THROWS_AS(effrank_stability_bound(SpsdMatrix(Matrix::Zero(2, 2)), k), Error);
}

TEST_CASE("effrank stability bound holds on random perturbations") {
  Rng rng(37);
  int checked = 0;
  for (int trial = 0; trial < 500; ++trial) {
    int n = 2 + static_cast<int>(rng() % 6);
    Matrix base = random_spd(rng, n, 0.2);
    Matrix pert = random_gaussian(rng, n, n) * 1e-3;
    pert = 0.5 * (pert + pert.transpose()).eval();
    auto res = effrank_stability_bound(SpsdMatrix(base), SpsdMatrix(base + pert));
    if (res.epsilon <= 1.0 - 1.0 / n) {
      CHECK(res.actual_gap <= res.bound + 1e-9);
      ++checked;
    }
  }
  CHECK(checked > 400);  // the perturbations are small enough to stay valid
}

TEST_CASE("cross_coupling_bounds") {
  Rng rng(41);
  BlockPartition p{{2, 2}};

  // Block-diagonal: no coupling, zero gap.
  Matrix bd = Matrix::Zero(4, 4);
  bd.block(0, 0, 2, 2) = random_spd(rng, 2);
  bd.block(2, 2, 2, 2) = random_spd(rng, 2);
  auto none = cross_coupling_bounds(SpsdMatrix(bd), p);
  CHECK(none.eps_delta == doctest::Approx(0.0));
  CHECK(none.actual_gap == doctest::Approx(0.0).epsilon(1e-10));

  // Tiny off-block entries: kappa(A) <= kappa_bound.
  Matrix coupled = bd;
  Matrix off = 1e-3 * random_gaussian(rng, 2, 2);
  coupled.block(0, 2, 2, 2) = off;
  coupled.block(2, 0, 2, 2) = off.transpose();
  auto small = cross_coupling_bounds(SpsdMatrix(coupled), p);
  CHECK(small.actual_gap <= small.effrank_bound + 1e-9);
  CHECK(condition_number(SpsdMatrix(coupled)) <= small.kappa_bound + 1e-9);

  // Off-block norm > lambda_min(bd): kappa bound degenerates.
  // [[4I, 1.5I], [1.5I, I]] is PSD with coupling norm 1.5 > lambda_min(bd) = 1.
  Matrix heavy = Matrix::Zero(4, 4);
  heavy.block(0, 0, 2, 2) = 4.0 * Matrix::Identity(2, 2);
  heavy.block(2, 2, 2, 2) = Matrix::Identity(2, 2);
  heavy.block(0, 2, 2, 2) = 1.5 * Matrix::Identity(2, 2);
  heavy.block(2, 0, 2, 2) = 1.5 * Matrix::Identity(2, 2);
  auto degen = cross_coupling_bounds(SpsdMatrix(heavy), p);
  CHECK(degen.kappa_bound == kInf);
}

TEST_CASE("routing_trace_weights") {
  BlockPartition p{{2, 2}};
  SpsdMatrix even = block_direct_sum({diag2(1, 1), diag2(1, 1)});
  Vector beta = routing_trace_weights(even, p);
  CHECK(beta(0) == doctest::Approx(0.5));
  CHECK(beta(1) == doctest::Approx(0.5));

  SpsdMatrix uneven = block_direct_sum({diag2(1, 1), diag2(2, 2)});
  beta = routing_trace_weights(uneven, p);
  CHECK(beta(0) == doctest::Approx(1.0 / 3.0));
  CHECK(beta(1) == doctest::Approx(2.0 / 3.0));
  CHECK(beta.sum() == doctest::Approx(1.0).epsilon(1e-12));

  // A zero block zeroes its weight and drops the rank ceiling by its dim.
  Rng rng(43);
  Matrix a = Matrix::Zero(4, 4);
  a.block(0, 0, 2, 2) = random_spd(rng, 2);
  SpsdMatrix withzero(a);
  beta = routing_trace_weights(withzero, p);
  CHECK(beta(1) == doctest::Approx(0.0));
  auto eigs = withzero.spectrum();
  int nonzero = 0;
  for (int i = 0; i < eigs.size(); ++i) nonzero += eigs.values()(i) > 0.0 ? 1 : 0;
  CHECK(nonzero <= 2);

  CHECK_THROWS_AS(routing_trace_weights(SpsdMatrix(Matrix::Zero(4, 4)), p), Error);
}

TEST_CASE("r_e bounds, scale invariance, and scaled-identity maximum") {
  Rng rng(47);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 1 + static_cast<int>(rng() % 7);
    SpsdMatrix m(random_spsd(rng, n, 1 + static_cast<int>(rng() % n)));
    double re = effective_rank(m);
    CHECK(re >= 1.0 - 1e-12);
    CHECK(re <= n + 1e-9);
    for (double c : {1e-3, 1.0, 1e3})
      CHECK(effective_rank(SpsdMatrix(c * m.entries())) == doctest::Approx(re).epsilon(1e-10));
  }
  // r_e = dim iff scaled identity (within tolerance).
  CHECK(effective_rank(SpsdMatrix(3.7 * Matrix::Identity(5, 5))) == doctest::Approx(5.0).epsilon(1e-12));
  SpsdMatrix near(Matrix(Vector::LinSpaced(5, 1.0, 1.4).asDiagonal()));
  CHECK(effective_rank(near) < 5.0 - 1e-8);
}

TEST_CASE("SpsdMatrix validation") {
  Matrix asym(2, 2);
  asym << 1, 0.5, 0.2, 1;
  CHECK_THROWS_AS(SpsdMatrix{asym}, Error);

  Matrix negdef(2, 2);
  negdef << -1, 0, 0, -1;
  CHECK_THROWS_AS(SpsdMatrix(negdef).spectrum(), Error);
}
