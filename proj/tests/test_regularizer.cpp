// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sphere/entk.hpp"
#include "sphere/regularizer.hpp"
#include "test_util.hpp"

using namespace sphere;
using namespace sphere::reg;
using sphere::moe::MoeConfig;
using sphere::moe::MoeModel;
using sphere::spectral::SpsdMatrix;

namespace {

SpsdMatrix diag2(double a, double b) {
  Vector d(2);
  d << a, b;
  return SpsdMatrix::diag(d);
}

MoeConfig tiny_config(uint64_t seed) {
  MoeConfig cfg;
  cfg.input_dim = 3;
  cfg.output_dim = 2;
  cfg.num_experts = 3;
  cfg.top_k = 2;
  cfg.expert_widths = {4, 3};
  cfg.gate_widths = {3};
  cfg.activation = moe::Activation::tanh;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("sphere_loss frozen values and dual-Gram identity") {
  Matrix phi(2, 2);
  phi << std::sqrt(2.0), 0, 0, std::sqrt(6.0);  // Gram = diag(1, 3)
  CHECK(sphere_loss(phi) == doctest::Approx(2.0).epsilon(1e-12));

  Matrix iso = std::sqrt(2.0) * Matrix::Identity(2, 2);
  CHECK(sphere_loss(iso) == doctest::Approx(0.0));

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix wide = random_gaussian(rng, 3, 7);  // m > N: sample side kicks in
    double fast = sphere_loss(wide);
    Matrix a = (wide.transpose() * wide) / 3.0;
    a.diagonal().array() -= a.trace() / 7.0;
    CHECK(fast == doctest::Approx(a.squaredNorm()).epsilon(1e-10));
    CHECK(fast >= 0.0);
  }
}

TEST_CASE("expansion identity on random SPSD matrices") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    int m = 1 + static_cast<int>(rng() % 7);
    Matrix a = random_spsd(rng, m);
    Matrix shifted = a;
    shifted.diagonal().array() -= a.trace() / m;
    double direct = shifted.squaredNorm();
    double expanded = a.squaredNorm() - a.trace() * a.trace() / m;
    CHECK(direct == doctest::Approx(expanded).epsilon(1e-9));
  }
}

TEST_CASE("sphere_loss_grad matches finite differences") {
  Rng rng(7);
  for (auto dims : {std::pair<int, int>{4, 3}, {3, 6}}) {
    Matrix phi = random_gaussian(rng, dims.first, dims.second);
    Matrix grad = sphere_loss_grad(phi);
    const double step = 1e-6;
    for (int i = 0; i < phi.rows(); ++i)
      for (int j = 0; j < phi.cols(); ++j) {
        Matrix p = phi, m = phi;
        p(i, j) += step;
        m(i, j) -= step;
        double fd = (sphere_loss(p) - sphere_loss(m)) / (2 * step);
        CHECK(std::abs(grad(i, j) - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
      }
  }

  Matrix iso = 1.7 * Matrix::Identity(3, 3);
  CHECK(sphere_loss_grad(iso).cwiseAbs().maxCoeff() == doctest::Approx(0.0));

  // Matrix-level gradient at diag(1,3) is 2(M - 2I) = diag(-2, 2).
  Matrix g = matrix_penalty_grad(diag2(1, 3));
  CHECK(g(0, 0) == doctest::Approx(-2.0));
  CHECK(g(1, 1) == doctest::Approx(2.0));
}

TEST_CASE("penalty is invariant under sample-space rotations") {
  Rng rng(9);
  Matrix phi = random_gaussian(rng, 5, 3);
  Matrix q = Eigen::HouseholderQR<Matrix>(random_gaussian(rng, 5, 5)).householderQ();
  CHECK(sphere_loss(q * phi) == doctest::Approx(sphere_loss(phi)).epsilon(1e-10));
  Matrix lhs = sphere_loss_grad(q * phi);
  Matrix rhs = q * sphere_loss_grad(phi);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("gram_gradient_step") {
  SpsdMatrix m = diag2(1, 3);
  auto quarter = gram_gradient_step(m, 0.25);
  CHECK(quarter.entries()(0, 0) == doctest::Approx(1.5));
  CHECK(quarter.entries()(1, 1) == doctest::Approx(2.5));
  CHECK(matrix_penalty(quarter) == doctest::Approx(0.5).epsilon(1e-12));

  auto half = gram_gradient_step(m, 0.5);
  CHECK((half.entries() - 2.0 * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(matrix_penalty(half) == doctest::Approx(0.0));

  SpsdMatrix iso(3.0 * Matrix::Identity(4, 4));
  CHECK((gram_gradient_step(iso, 0.3).entries() - iso.entries()).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(gram_gradient_step(m, 0.6), Error);
  CHECK_THROWS_AS(gram_gradient_step(m, -0.1), Error);
}

TEST_CASE("iterated gram steps decay geometrically with monotone kappa") {
  Rng rng(11);
  SpsdMatrix m(random_spd(rng, 5, 0.05));
  double eta = 0.15;
  double rate = (1.0 - 2.0 * eta) * (1.0 - 2.0 * eta);
  double penalty = matrix_penalty(m);
  double kappa = spectral::condition_number(m);
  for (int it = 0; it < 100; ++it) {
    m = gram_gradient_step(m, eta);
    double p = matrix_penalty(m);
    CHECK(p == doctest::Approx(rate * penalty).epsilon(1e-8));
    double k = spectral::condition_number(m);
    CHECK(k <= kappa + 1e-12);
    penalty = p;
    kappa = k;
  }
}

TEST_CASE("one contraction step never decreases the proxy lower bound") {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    SpsdMatrix a(random_spd(rng, 2 + static_cast<int>(rng() % 4), 0.05));
    SpsdMatrix g(random_spd(rng, 2 + static_cast<int>(rng() % 4), 0.05));
    int k = 12;
    auto before = entk::kron_proxy(a, g, k);
    auto after = entk::kron_proxy(gram_gradient_step(a, 0.2), g, k);
    CHECK(after.lower_bound >= before.lower_bound - 1e-9);

    // Block-mixture surrogate with all other terms fixed is monotone too.
    double alpha = 0.4;
    double other = 1.7;  // frozen contribution of the remaining blocks
    double surrogate_before = std::exp(alpha * std::log(before.lower_bound) + other);
    double surrogate_after = std::exp(alpha * std::log(after.lower_bound) + other);
    CHECK(surrogate_after >= surrogate_before - 1e-9);
  }
}

TEST_CASE("adaptive_lambda") {
  SphereConfig cfg;
  cfg.ratio = 1e-3;
  cfg.eps = 1e-12;
  CHECK(adaptive_lambda(10.0, 2.0, cfg) == doctest::Approx(5e-3).epsilon(1e-9));

  cfg.eps = 1e-8;
  double lam = adaptive_lambda(10.0, 0.0, cfg);
  CHECK(std::isfinite(lam));
  CHECK(lam == doctest::Approx(1e-3 * 10.0 / 1e-8));

  cfg.ratio = 0.0;
  CHECK(adaptive_lambda(5.0, 1.0, cfg) == 0.0);

  cfg.ratio = 1e-3;
  cfg.fixed_lambda = 0.25;
  CHECK(adaptive_lambda(100.0, 1.0, cfg) == 0.25);
}

TEST_CASE("total_loss variants") {
  SphereConfig cfg;
  Rng rng(15);
  Matrix phi = random_gaussian(rng, 4, 6);

  auto zero = total_loss(3.5, {phi}, 0.0, cfg, 3);
  CHECK(zero.total == 3.5);

  Matrix iso = 2.0 * Matrix::Identity(4, 4);
  auto isotropic = total_loss(1.25, {iso}, 0.7, cfg, 2);
  CHECK(isotropic.total == doctest::Approx(1.25).epsilon(1e-12));

  auto pos = total_loss(1.0, {phi}, 0.5, cfg, 3);
  auto neg = total_loss(1.0, {phi}, -0.5, cfg, 3);
  CHECK(pos.total - 1.0 == doctest::Approx(-(neg.total - 1.0)).epsilon(1e-12));

  CHECK_THROWS_AS(total_loss(1.0, {}, 0.5, cfg, 3), Error);

  // per_expert_sum equals the sum of per-block penalties with per-expert m.
  cfg.variant = Variant::per_expert_sum;
  auto per = total_loss(0.0, {phi}, 1.0, cfg, 3);
  double expect = sphere_loss(phi.middleCols(0, 2)) + sphere_loss(phi.middleCols(2, 2)) +
                  sphere_loss(phi.middleCols(4, 2));
  CHECK(per.penalty_sum == doctest::Approx(expect).epsilon(1e-12));

  // proxy_kron equals the matrix penalty of the assembled Kronecker product.
  cfg.variant = Variant::proxy_kron;
  Matrix psi = random_gaussian(rng, 4, 3);
  auto kron = total_loss(0.0, {phi, psi}, 1.0, cfg, 3);
  SpsdMatrix a((phi.transpose() * phi) / 4.0);
  SpsdMatrix g((psi.transpose() * psi) / 4.0);
  double oracle = matrix_penalty(spectral::kronecker(a, g));
  CHECK(kron.penalty_sum == doctest::Approx(oracle).epsilon(1e-9));
}

TEST_CASE("weighted_concat parameter gradient matches finite differences") {
  MoeConfig mcfg = tiny_config(17);
  MoeModel model = moe::init_model(mcfg);
  Rng rng(18);
  Matrix batch = random_gaussian(rng, 5, mcfg.input_dim);
  SphereConfig cfg;
  double lambda = 0.8;

  auto value = [&](const MoeModel& m) {
    auto fr = moe::forward(m, batch);
    std::vector<Matrix> phis;
    for (int l : placement_layers(m, cfg))
      phis.push_back(moe::weighted_feature_matrix(fr.trace, m, l));
    return total_loss(0.0, phis, lambda, cfg, mcfg.num_experts).total;
  };

  auto fr = moe::forward(model, batch);
  std::vector<Matrix> phis;
  std::vector<moe::FeatureCotangent> feats;
  auto layers = placement_layers(model, cfg);
  for (int l : layers) phis.push_back(moe::weighted_feature_matrix(fr.trace, model, l));
  auto cots = total_loss_cotangents(phis, cfg, mcfg.num_experts);
  for (size_t j = 0; j < layers.size(); ++j)
    feats.push_back({layers[j], lambda * cots[j]});
  Matrix zero_cot = Matrix::Zero(5, mcfg.output_dim);
  auto bundle = moe::backward_extended(model, fr.trace, zero_cot, feats);
  Vector grad = bundle.flatten(model);

  Vector theta = model.flatten();
  const double step = 1e-5;
  double max_rel = 0.0;
  for (int j = 0; j < theta.size(); ++j) {
    Vector tp = theta, tm = theta;
    tp(j) += step;
    tm(j) -= step;
    MoeModel mp = model, mm = model;
    mp.unflatten(tp);
    mm.unflatten(tm);
    double fd = (value(mp) - value(mm)) / (2 * step);
    max_rel = std::max(max_rel, std::abs(grad(j) - fd) / std::max(std::abs(fd), 1e-3));
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("all_layers placement gradient matches finite differences") {
  MoeConfig mcfg = tiny_config(19);
  MoeModel model = moe::init_model(mcfg);
  Rng rng(20);
  Matrix batch = random_gaussian(rng, 4, mcfg.input_dim);
  SphereConfig cfg;
  cfg.placement = Placement::all_layers;
  cfg.variant = Variant::per_expert_sum;
  double lambda = 0.5;

  auto value = [&](const MoeModel& m) {
    auto fr = moe::forward(m, batch);
    std::vector<Matrix> phis;
    for (int l : placement_layers(m, cfg))
      phis.push_back(moe::weighted_feature_matrix(fr.trace, m, l));
    return total_loss(0.0, phis, lambda, cfg, mcfg.num_experts).total;
  };

  auto fr = moe::forward(model, batch);
  auto layers = placement_layers(model, cfg);
  REQUIRE(layers.size() == 2);
  std::vector<Matrix> phis;
  for (int l : layers) phis.push_back(moe::weighted_feature_matrix(fr.trace, model, l));
  auto cots = total_loss_cotangents(phis, cfg, mcfg.num_experts);
  std::vector<moe::FeatureCotangent> feats;
  for (size_t j = 0; j < layers.size(); ++j) feats.push_back({layers[j], lambda * cots[j]});
  auto bundle = moe::backward_extended(model, fr.trace, Matrix::Zero(4, mcfg.output_dim), feats);
  Vector grad = bundle.flatten(model);

  Vector theta = model.flatten();
  const double step = 1e-5;
  double max_rel = 0.0;
  for (int j = 0; j < theta.size(); ++j) {
    Vector tp = theta, tm = theta;
    tp(j) += step;
    tm(j) -= step;
    MoeModel mp = model, mm = model;
    mp.unflatten(tp);
    mm.unflatten(tm);
    double fd = (value(mp) - value(mm)) / (2 * step);
    max_rel = std::max(max_rel, std::abs(grad(j) - fd) / std::max(std::abs(fd), 1e-3));
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("gradient_gram variant gradient matches finite differences") {
  MoeConfig mcfg = tiny_config(21);
  MoeModel model = moe::init_model(mcfg);
  Rng rng(22);
  int n = 4;
  Matrix batch = random_gaussian(rng, n, mcfg.input_dim);
  Matrix u = Matrix::Ones(n, mcfg.output_dim);  // fixed cotangent
  int layer = model.num_expert_layers() - 2;

  auto psi_of = [&](const MoeModel& m) {
    auto fr = moe::forward(m, batch);
    auto b = moe::backward(m, fr.trace, u);
    return moe::backprop_feature_matrix(b, fr.trace, m, layer);
  };
  auto value = [&](const MoeModel& m) { return sphere_loss(psi_of(m)); };

  auto fr = moe::forward(model, batch);
  Matrix psi = psi_of(model);
  Matrix dpsi = sphere_loss_grad(psi);
  auto bundle = moe::backward_through_backprops(model, fr.trace, u, layer, dpsi);
  Vector grad = bundle.flatten(model);

  Vector theta = model.flatten();
  const double step = 1e-5;
  double max_rel = 0.0;
  for (int j = 0; j < theta.size(); ++j) {
    Vector tp = theta, tm = theta;
    tp(j) += step;
    tm(j) -= step;
    MoeModel mp = model, mm = model;
    mp.unflatten(tp);
    mm.unflatten(tm);
    double fd = (value(mp) - value(mm)) / (2 * step);
    max_rel = std::max(max_rel, std::abs(grad(j) - fd) / std::max(std::abs(fd), 1e-3));
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("config round-trip and validation") {
  SphereConfig cfg;
  cfg.ratio = -1e-3;
  cfg.variant = Variant::proxy_kron;
  cfg.fixed_lambda = 0.1;
  auto back = SphereConfig::from_json(cfg.to_json());
  CHECK(back.ratio == cfg.ratio);
  CHECK(back.variant == cfg.variant);
  CHECK(back.fixed_lambda.value() == 0.1);

  SphereConfig bad;
  bad.eps = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  SphereConfig bad2;
  bad2.variant = Variant::gradient_gram;
  bad2.placement = Placement::all_layers;
  CHECK_THROWS_AS(bad2.validate(), Error);
}
