// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Empirical-NTK construction and spectral-plasticity measurement: the exact
// dense path, the matrix-free stochastic-Lanczos path, Gauss-Newton block
// partitioning, the Kronecker proxy with its lower bound, and the
// assumption-validation diagnostics.

#ifndef SPHERE_ENTK_HPP
#define SPHERE_ENTK_HPP

#include <functional>
#include <utility>
#include <vector>

#include "sphere/moe.hpp"
#include "sphere/spectral.hpp"

namespace sphere::entk {

using moe::ForwardTrace;
using moe::GradBundle;
using moe::MoeModel;
using spectral::SpsdMatrix;

using LinearOp = std::function<Vector(const Vector&)>;

/// Matrix-free handle for v -> J (J^T v) on a fixed probe batch. The induced
/// matrix is the eNTK of the scalar projection g(x) = 1^T f(x); it is never
/// materialized by apply().
class EntkOperator {
 public:
  EntkOperator(const MoeModel& model, Matrix probe_batch);

  int dim() const { return static_cast<int>(batch_.rows()); }
  Vector apply(const Vector& v) const;
  LinearOp as_fn() const {
    return [this](const Vector& v) { return apply(v); };
  }
  int num_applies() const { return applies_; }

 private:
  const MoeModel* model_;
  Matrix batch_;
  ForwardTrace trace_;
  mutable int applies_ = 0;
};

struct SlqConfig {
  int num_probes = 16;
  int lanczos_steps = 30;
  uint64_t seed = 0;
  bool reorthogonalize = true;
};

/// K = J J^T over the batch; dense, N <= 512.
SpsdMatrix exact_entk(const MoeModel& model, const Matrix& batch);

/// G^GN = (1/N) J^T J; dense, P <= 4096. Shares nonzero eigenvalues with
/// (1/N) K, hence the same effective rank.
SpsdMatrix gauss_newton(const MoeModel& model, const Matrix& batch);

/// r_e(K) on the probe batch -- the logged spectral-plasticity metric.
double spectral_plasticity_exact(const MoeModel& model, const Matrix& probe_batch);

/// Stochastic Lanczos quadrature estimate of r_e for an SPSD operator,
/// exp(log Tr(K) - Tr(K log K)/Tr(K)), using normalized Gaussian probes and
/// Gauss quadrature on the Lanczos tridiagonal. Deterministic given the
/// seed; touches the operator only through apply. Lanczos breakdown
/// truncates the tridiagonal (exact invariant subspace), it is not an error.
double slq_effective_rank(const LinearOp& op, int dim, const SlqConfig& cfg);

double spectral_plasticity_slq(const EntkOperator& op, const SlqConfig& cfg);

/// One plain gradient-descent step against the functional iteration
/// Delta f = -eta K grad_f L: returns max_i |Delta g_i - (-eta K c)_i|,
/// which is O(eta^2) for smooth activations.
double functional_update_check(const MoeModel& model, const Matrix& batch,
                               const Vector& loss_cotangent, double eta);

struct GnBlocks {
  Matrix gate;    // G^GN,g
  Matrix expert;  // G^GN,exp
  Matrix cross;   // G^GN,g,exp
  std::vector<Matrix> gate_layer_blocks;    // per-layer diagonal sub-blocks
  std::vector<Matrix> expert_layer_blocks;  // per-layer, experts gathered
  Vector nuclear_norms;  // s_l, gate layers then expert layers
  Vector alpha;          // s_l / S
  double mixture_effrank = 0.0;   // Lemma-style mixture over diagonal blocks
  double trace = 0.0;             // tr(G^GN)
};

/// Slice G^GN by the documented parameter flattening into gate/expert and
/// per-layer diagonal blocks, with nuclear-norm mixture weights.
GnBlocks gn_partition(const MoeModel& model, const Matrix& batch);

struct GateExpertCosine {
  double cosine;        // ||cross||_F / sqrt(||gate||_F ||expert||_F)
  double epsilon;       // sqrt(P) * sqrt(2) ||cross||_F / tr(G^GN)
  double re_gap_bound;  // entropy bound on |log r_e(G) - log r_e(G_bd)|
};

/// Normalized gate-expert block cosine and the induced decoupling bound.
GateExpertCosine gate_expert_block_cosine(const GnBlocks& blocks);

struct KronProxy {
  double proxy_effrank;  // r_e(A) * r_e(G)
  double lower_bound;    // k_l / (kappa(A) kappa(G))
};

/// Kronecker-proxy surrogate for an expert-layer block of dimension k_l.
/// Both factors must be SPD (ridge-shift first).
KronProxy kron_proxy(const SpsdMatrix& a, const SpsdMatrix& g, int k_l);

struct KfacResidual {
  double lhs;  // || (1/T) sum (g g^T) (x) (a a^T)  -  Gbar (x) Abar ||_F
  double rhs;  // Cauchy-Schwarz product of centered-factor RMS norms
};

/// K-FAC factorization residual bound over (feature, gradient) token pairs.
KfacResidual kfac_residual_bound(const std::vector<Vector>& token_features,
                                 const std::vector<Vector>& token_grads);

enum class ProxyCorrelation {
  feature_vs_entk,  // r_e(A^exp_last) against r_e(K)
  kron_vs_exact,    // r_e(A (x) G) against r_e(exact expert output block)
};

/// Pearson correlation of the chosen proxy/target pair across rollout
/// batches at a fixed checkpoint. Needs >= 10 batches; throws
/// degenerate_variance when either series is constant.
double proxy_target_correlation(const MoeModel& model, const std::vector<Matrix>& batches,
                                ProxyCorrelation mode);

double pearson(const Vector& x, const Vector& y);

}  // namespace sphere::entk

#endif  // SPHERE_ENTK_HPP
