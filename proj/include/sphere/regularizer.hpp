// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// The isotropy penalty on gating-weighted expert feature Grams, its exact
// gradient, the adaptive coefficient, and the ablation variants.

#ifndef SPHERE_REGULARIZER_HPP
#define SPHERE_REGULARIZER_HPP

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sphere/moe.hpp"
#include "sphere/spectral.hpp"

namespace sphere::reg {

enum class Placement { last_layer, all_layers };
enum class Variant { weighted_concat, per_expert_sum, gradient_gram, proxy_kron };

Placement placement_from_string(const std::string& s);
Variant variant_from_string(const std::string& s);
std::string to_string(Placement p);
std::string to_string(Variant v);

struct SphereConfig {
  double ratio = 1e-3;  // rho; negative flips the isotropy pressure
  double eps = 1e-8;    // guards the adaptive-lambda division
  Placement placement = Placement::last_layer;
  Variant variant = Variant::weighted_concat;
  std::optional<double> fixed_lambda;  // bypasses adaptive scaling when set

  void validate() const;
  nlohmann::json to_json() const;
  static SphereConfig from_json(const nlohmann::json& j);
};

/// || A - (tr A / m) I ||_F^2 for A = (1/N) Phi^T Phi, evaluated as
/// ||G||_F^2 - tr(G)^2 / m on whichever Gram is smaller to form (the two
/// share nonzero eigenvalues, so the value is identical). Always >= 0, and
/// 0 exactly when A is a scaled identity.
double sphere_loss(const Matrix& phi);

/// Exact gradient d sphere_loss / d Phi, computed from the smaller-side Gram:
/// (4/N) Phi (A - tr(A)/m I) == (4/N) (G - tr(G)/m I) Phi.
Matrix sphere_loss_grad(const Matrix& phi);

/// Matrix-level penalty ||M - (tr M / m) I||_F^2 and its gradient 2(M - mean I).
double matrix_penalty(const spectral::SpsdMatrix& m);
Matrix matrix_penalty_grad(const spectral::SpsdMatrix& m);

/// One gradient-descent step of size eta on the matrix penalty:
/// M' = (1 - 2 eta) M + 2 eta (tr M / m) I. Requires 0 <= eta <= 1/2;
/// trace is preserved, kappa never increases, and the penalty contracts by
/// exactly (1 - 2 eta)^2.
spectral::SpsdMatrix gram_gradient_step(const spectral::SpsdMatrix& m, double eta);

/// rho * task_norm / (sphere_norm + eps); fixed_lambda overrides when set.
/// The result is a constant for the subsequent step (no gradient flows
/// through it).
double adaptive_lambda(double task_grad_norm, double sphere_grad_norm, const SphereConfig& cfg);

struct LossDecomposition {
  double total = 0.0;
  double task = 0.0;
  double penalty_sum = 0.0;  // unscaled sum of per-term penalties
  double lambda = 0.0;
  std::vector<double> per_term;
};

/// task_loss + lambda * sum of variant penalties over the placement set.
/// weighted_concat / per_expert_sum take one Phi per placement layer;
/// gradient_gram takes the backprop matrix Psi instead; proxy_kron takes
/// the pair {Phi, Psi} and penalizes the Kronecker product of their Grams.
/// num_experts drives the per-expert block split.
LossDecomposition total_loss(double task_loss, const std::vector<Matrix>& phi_set,
                             double lambda, const SphereConfig& cfg, int num_experts);

/// Per-matrix penalty cotangents matching total_loss's per_term values:
/// entry j is d(per_term[j]) / d(phi_set[j]). For proxy_kron the two entries
/// are the gradients with respect to Phi and Psi.
std::vector<Matrix> total_loss_cotangents(const std::vector<Matrix>& phi_set,
                                          const SphereConfig& cfg, int num_experts);

/// Hidden expert layers the placement touches (1-based), last layer last.
std::vector<int> placement_layers(const moe::MoeModel& model, const SphereConfig& cfg);

}  // namespace sphere::reg

#endif  // SPHERE_REGULARIZER_HPP
