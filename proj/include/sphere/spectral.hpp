// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Dense spectral linear algebra for small SPSD matrices: spectral-entropy
// effective rank, condition numbers, Kronecker / block Khatri-Rao /
// Tracy-Singh constructions, spectral contraction, and the closed-form
// perturbation bounds used by the diagnostics layer.

#ifndef SPHERE_SPECTRAL_HPP
#define SPHERE_SPECTRAL_HPP

#include <utility>
#include <vector>

#include "sphere/common.hpp"

namespace sphere::spectral {

/// Ordered eigenvalue vector of an SPSD matrix: non-increasing, all >= 0.
class Spectrum {
 public:
  explicit Spectrum(Vector values);

  const Vector& values() const { return values_; }
  int size() const { return static_cast<int>(values_.size()); }
  double sum() const { return values_.sum(); }
  double max() const { return values_.size() > 0 ? values_(0) : 0.0; }
  double min() const { return values_.size() > 0 ? values_(values_.size() - 1) : 0.0; }

 private:
  Vector values_;  // sorted non-increasing
};

/// Symmetric positive-semidefinite matrix. Construction validates symmetry
/// (max |M_ij - M_ji| <= 1e-12 * max|M|) and stores the symmetrized entries;
/// definiteness is checked when the spectrum is first required.
class SpsdMatrix {
 public:
  explicit SpsdMatrix(Matrix entries);

  int dim() const { return static_cast<int>(entries_.rows()); }
  const Matrix& entries() const { return entries_; }
  double trace() const { return entries_.trace(); }

  /// Eigenvalues sorted descending, floored at zero, with values below
  /// 1e-12 * trace clipped to exact zeros. Throws if an eigenvalue falls
  /// below -1e-10 * trace, or if dim exceeds the dense solver cap.
  Spectrum spectrum() const;

  static SpsdMatrix identity(int n) { return SpsdMatrix(Matrix::Identity(n, n)); }
  static SpsdMatrix diag(const Vector& d) { return SpsdMatrix(Matrix(d.asDiagonal())); }

 private:
  Matrix entries_;
};

/// Partition of {0..dim-1} into contiguous blocks.
struct BlockPartition {
  std::vector<int> block_sizes;

  int num_blocks() const { return static_cast<int>(block_sizes.size()); }
  int total() const;
  int offset(int b) const;  // start index of block b
  void check_matches(int dim) const;
};

// -- Effective rank and condition number --------------------------------

/// exp(-sum p_i log p_i) over trace-normalized positive eigenvalues, with
/// the convention 0 log 0 = 0. Throws zero_spectrum on an all-zero spectrum.
double effective_rank(const Spectrum& s);
double effective_rank(const SpsdMatrix& m);

/// lambda_max / lambda_min; +infinity when the smallest eigenvalue clips
/// to zero (singular matrices have kappa = +inf, not an error).
double condition_number(const Spectrum& s);
double condition_number(const SpsdMatrix& m);

/// M + eps*I with eps > 0; strictly SPD, ||result - M||_2 = eps.
SpsdMatrix ridge_shift(const SpsdMatrix& m, double eps);

// -- Structured constructions --------------------------------------------

SpsdMatrix kronecker(const SpsdMatrix& a, const SpsdMatrix& b);

SpsdMatrix block_direct_sum(const std::vector<SpsdMatrix>& blocks);

/// Mixture form of the direct-sum effective rank,
/// exp(H(alpha) + sum_b alpha_b log r_e(M_b)) with nuclear-norm shares
/// alpha_b. Equals effective_rank(block_direct_sum(blocks)).
double block_effrank_mixture(const std::vector<SpsdMatrix>& blocks);

/// (1-beta) M + beta (tr M / m) I: trace-preserving eigenvalue interpolation
/// toward the mean; kappa never increases and eigenvectors are unchanged.
SpsdMatrix spectral_contraction_step(const SpsdMatrix& m, double beta);

/// Blockwise Kronecker product on corresponding blocks:
/// result block (e,e') = A_{e,e'} (x) G_{e,e'}.
SpsdMatrix khatri_rao_block(const SpsdMatrix& a, const SpsdMatrix& g,
                            const BlockPartition& pa, const BlockPartition& pg);

struct TracySinghResult {
  SpsdMatrix product;               // all-pairs blockwise Kronecker product
  std::vector<int> khatri_indices;  // principal-submatrix selection recovering A*G
};

/// All-pairs blockwise Kronecker product together with the selection index
/// list whose principal submatrix is khatri_rao_block(a, g, pa, pg).
/// Certification-scale only: product dim must not exceed 64.
TracySinghResult tracy_singh(const SpsdMatrix& a, const SpsdMatrix& g,
                             const BlockPartition& pa, const BlockPartition& pg);

// -- Closed-form bounds ----------------------------------------------------

struct InterlacingBound {
  double bound;    // k / kappa(M)
  double actual;   // r_e of the selected principal submatrix
  bool equality;   // kappa(M) == 1 within clip tolerance
};

/// Cauchy-interlacing effective-rank bound for a principal submatrix of an
/// SPD matrix: r_e(M[keep,keep]) >= |keep| / kappa(M).
InterlacingBound interlacing_lower_bound(const SpsdMatrix& m, const std::vector<int>& keep);

struct EffrankStabilityBound {
  double epsilon;     // sqrt(n) ||K - Kt||_F / min(tr K, tr Kt)
  double bound;       // eps log(n-1) + h(eps), +inf when eps > 1 - 1/n
  double actual_gap;  // |log r_e(K) - log r_e(Kt)|
};

/// Fannes-Audenaert stability of log r_e under Frobenius perturbations.
EffrankStabilityBound effrank_stability_bound(const SpsdMatrix& k, const SpsdMatrix& kt);

struct CrossCouplingBounds {
  double eps_delta;      // sqrt(D) ||off-block part||_F / tr(A)
  double effrank_bound;  // entropy bound on |log r_e(A) - log r_e(bd)|
  double kappa_bound;    // Weyl bound on kappa(A); +inf when invalid
  double actual_gap;     // |log r_e(A) - log r_e(bd)|
};

/// Splits A into block-diagonal part + cross-expert coupling and returns the
/// effective-rank and condition-number control bounds for the split.
CrossCouplingBounds cross_coupling_bounds(const SpsdMatrix& a, const BlockPartition& p);

/// beta_e = tr(diagonal block e) / tr(A); a probability vector over experts.
Vector routing_trace_weights(const SpsdMatrix& a, const BlockPartition& p);

/// Binary entropy -x log x - (1-x) log(1-x) with the 0 log 0 = 0 convention.
double binary_entropy(double x);

}  // namespace sphere::spectral

#endif  // SPHERE_SPECTRAL_HPP
