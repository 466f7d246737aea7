// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "sphere/regularizer.hpp"

#include <cmath>

namespace sphere::reg {

Placement placement_from_string(const std::string& s) {
  if (s == "last_layer") return Placement::last_layer;
  if (s == "all_layers") return Placement::all_layers;
  fail(Err::config_error, "unknown placement: " + s);
}

Variant variant_from_string(const std::string& s) {
  if (s == "weighted_concat") return Variant::weighted_concat;
  if (s == "per_expert_sum") return Variant::per_expert_sum;
  if (s == "gradient_gram") return Variant::gradient_gram;
  if (s == "proxy_kron") return Variant::proxy_kron;
  fail(Err::config_error, "unknown variant: " + s);
}

std::string to_string(Placement p) {
  return p == Placement::last_layer ? "last_layer" : "all_layers";
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::weighted_concat: return "weighted_concat";
    case Variant::per_expert_sum: return "per_expert_sum";
    case Variant::gradient_gram: return "gradient_gram";
    case Variant::proxy_kron: return "proxy_kron";
  }
  return "?";
}

void SphereConfig::validate() const {
  require(eps > 0.0, Err::config_error, "SphereConfig: eps must be > 0");
  if (variant == Variant::gradient_gram || variant == Variant::proxy_kron)
    require(placement == Placement::last_layer, Err::config_error,
            "SphereConfig: backprop-Gram variants support last_layer placement only");
}

nlohmann::json SphereConfig::to_json() const {
  nlohmann::json j{{"ratio", ratio},
                   {"eps", eps},
                   {"placement", to_string(placement)},
                   {"variant", to_string(variant)}};
  if (fixed_lambda) j["fixed_lambda"] = *fixed_lambda;
  return j;
}

SphereConfig SphereConfig::from_json(const nlohmann::json& j) {
  SphereConfig cfg;
  cfg.ratio = j.value("ratio", cfg.ratio);
  cfg.eps = j.value("eps", cfg.eps);
  if (j.contains("placement")) cfg.placement = placement_from_string(j["placement"]);
  if (j.contains("variant")) cfg.variant = variant_from_string(j["variant"]);
  if (j.contains("fixed_lambda") && !j["fixed_lambda"].is_null())
    cfg.fixed_lambda = j["fixed_lambda"].get<double>();
  cfg.validate();
  return cfg;
}

namespace {

// Frobenius norm squared and trace of the smaller-side Gram of phi. Both
// Grams share nonzero eigenvalues, so ||.||_F^2 and tr agree; the isotropic
// reference scale is always the feature dimension m.
struct GramStats {
  double fro2;
  double trace;
  int m;  // feature dimension
};

GramStats small_gram_stats(const Matrix& phi) {
  int n = static_cast<int>(phi.rows());
  int m = static_cast<int>(phi.cols());
  require(n >= 1 && m >= 1, Err::empty_input, "sphere_loss: empty feature matrix");
  Matrix g;
  if (m <= n)
    g = (phi.transpose() * phi) / static_cast<double>(n);
  else
    g = (phi * phi.transpose()) / static_cast<double>(n);
  return GramStats{g.squaredNorm(), g.trace(), m};
}

}  // namespace

double sphere_loss(const Matrix& phi) {
  GramStats s = small_gram_stats(phi);
  return s.fro2 - s.trace * s.trace / s.m;
}

Matrix sphere_loss_grad(const Matrix& phi) {
  int n = static_cast<int>(phi.rows());
  int m = static_cast<int>(phi.cols());
  require(n >= 1 && m >= 1, Err::empty_input, "sphere_loss_grad: empty feature matrix");
  if (m <= n) {
    Matrix a = (phi.transpose() * phi) / static_cast<double>(n);
    a.diagonal().array() -= a.trace() / m;
    return (4.0 / n) * phi * a;
  }
  Matrix g = (phi * phi.transpose()) / static_cast<double>(n);
  g.diagonal().array() -= g.trace() / m;  // the reference scale stays m
  return (4.0 / n) * g * phi;
}

double matrix_penalty(const spectral::SpsdMatrix& m) {
  double tr = m.trace();
  return m.entries().squaredNorm() - tr * tr / m.dim();
}

Matrix matrix_penalty_grad(const spectral::SpsdMatrix& m) {
  Matrix g = 2.0 * m.entries();
  g.diagonal().array() -= 2.0 * m.trace() / m.dim();
  return g;
}

spectral::SpsdMatrix gram_gradient_step(const spectral::SpsdMatrix& m, double eta) {
  require(eta >= 0.0 && eta <= 0.5, Err::eta_out_of_range,
          "gram_gradient_step: eta outside [0, 1/2]");
  return spectral::spectral_contraction_step(m, 2.0 * eta);
}

double adaptive_lambda(double task_grad_norm, double sphere_grad_norm, const SphereConfig& cfg) {
  require(task_grad_norm >= 0.0 && sphere_grad_norm >= 0.0, Err::invalid_argument,
          "adaptive_lambda: negative norm");
  if (cfg.fixed_lambda) return *cfg.fixed_lambda;
  return cfg.ratio * task_grad_norm / (sphere_grad_norm + cfg.eps);
}

namespace {

void check_placement_count(const std::vector<Matrix>& phi_set, const SphereConfig& cfg) {
  size_t expect;
  if (cfg.variant == Variant::proxy_kron)
    expect = 2;  // {Phi, Psi}
  else if (cfg.placement == Placement::last_layer)
    expect = 1;
  else
    expect = phi_set.size();  // all_layers: any non-empty list
  require(!phi_set.empty() && (cfg.placement == Placement::all_layers ||
                               phi_set.size() == expect),
          Err::placement_mismatch, "total_loss: matrix count does not match placement/variant");
}

// Kronecker-product penalty value and factor gradients:
// P = ||A||^2 ||G||^2 - (trA trG)^2 / (mA mG) for A, G the Grams of the two
// factor matrices.
struct KronPenalty {
  double value;
  Matrix d_phi;
  Matrix d_psi;
};

KronPenalty kron_penalty(const Matrix& phi, const Matrix& psi) {
  double n = static_cast<double>(phi.rows());
  require(psi.rows() == phi.rows(), Err::shape_mismatch, "proxy_kron: batch sizes differ");
  Matrix a = (phi.transpose() * phi) / n;
  Matrix g = (psi.transpose() * psi) / n;
  double ma = static_cast<double>(a.rows()), mg = static_cast<double>(g.rows());
  double fa = a.squaredNorm(), fg = g.squaredNorm();
  double ta = a.trace(), tg = g.trace();
  KronPenalty out;
  out.value = fa * fg - (ta * tg) * (ta * tg) / (ma * mg);
  // dP/dA = 2 ||G||^2 A - 2 trA trG^2 / (mA mG) I, then chain through the Gram.
  Matrix da = 2.0 * fg * a;
  da.diagonal().array() -= 2.0 * ta * tg * tg / (ma * mg);
  Matrix dg = 2.0 * fa * g;
  dg.diagonal().array() -= 2.0 * tg * ta * ta / (ma * mg);
  out.d_phi = (2.0 / n) * phi * da;
  out.d_psi = (2.0 / n) * psi * dg;
  return out;
}

}  // namespace

LossDecomposition total_loss(double task_loss, const std::vector<Matrix>& phi_set, double lambda,
                             const SphereConfig& cfg, int num_experts) {
  check_placement_count(phi_set, cfg);
  LossDecomposition out;
  out.task = task_loss;
  out.lambda = lambda;

  switch (cfg.variant) {
    case Variant::weighted_concat:
    case Variant::gradient_gram:
      for (const Matrix& phi : phi_set) out.per_term.push_back(sphere_loss(phi));
      break;
    case Variant::per_expert_sum:
      for (const Matrix& phi : phi_set) {
        require(phi.cols() % num_experts == 0, Err::shape_mismatch,
                "per_expert_sum: columns not divisible by expert count");
        int width = static_cast<int>(phi.cols()) / num_experts;
        double term = 0.0;
        for (int e = 0; e < num_experts; ++e)
          term += sphere_loss(phi.middleCols(e * width, width));
        out.per_term.push_back(term);
      }
      break;
    case Variant::proxy_kron:
      out.per_term.push_back(kron_penalty(phi_set[0], phi_set[1]).value);
      break;
  }

  for (double p : out.per_term) out.penalty_sum += p;
  out.total = task_loss + lambda * out.penalty_sum;
  return out;
}

std::vector<Matrix> total_loss_cotangents(const std::vector<Matrix>& phi_set,
                                          const SphereConfig& cfg, int num_experts) {
  check_placement_count(phi_set, cfg);
  std::vector<Matrix> cots;
  switch (cfg.variant) {
    case Variant::weighted_concat:
    case Variant::gradient_gram:
      for (const Matrix& phi : phi_set) cots.push_back(sphere_loss_grad(phi));
      break;
    case Variant::per_expert_sum:
      for (const Matrix& phi : phi_set) {
        int width = static_cast<int>(phi.cols()) / num_experts;
        Matrix d = Matrix::Zero(phi.rows(), phi.cols());
        for (int e = 0; e < num_experts; ++e)
          d.middleCols(e * width, width) = sphere_loss_grad(phi.middleCols(e * width, width));
        cots.push_back(std::move(d));
      }
      break;
    case Variant::proxy_kron: {
      KronPenalty kp = kron_penalty(phi_set[0], phi_set[1]);
      cots.push_back(std::move(kp.d_phi));
      cots.push_back(std::move(kp.d_psi));
      break;
    }
  }
  return cots;
}

std::vector<int> placement_layers(const moe::MoeModel& model, const SphereConfig& cfg) {
  int le = model.num_expert_layers();
  require(le >= 2, Err::bad_layer, "placement_layers: model has no hidden expert layer");
  if (cfg.placement == Placement::last_layer) return {le - 1};
  std::vector<int> layers;
  for (int l = 1; l <= le - 1; ++l) layers.push_back(l);
  return layers;
}

}  // namespace sphere::reg
