// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0

#ifndef SPHERE_COMMON_HPP
#define SPHERE_COMMON_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace sphere {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Eigenvalues below kEigClipRel * trace are treated as exact zeros; values
// below -kNegEigTolRel * trace violate positive semidefiniteness.
inline constexpr double kEigClipRel = 1e-12;
inline constexpr double kNegEigTolRel = 1e-10;

// Dense eigendecompositions are refused above this dimension.
inline constexpr int kMaxDenseDim = 4096;

enum class Err {
  invalid_argument,
  zero_spectrum,
  partition_mismatch,
  dim_too_large,
  singular_input,
  zero_trace,
  shape_mismatch,
  trace_mismatch,
  too_large,
  bad_layer,
  empty_input,
  degenerate_variance,
  eta_out_of_range,
  placement_mismatch,
  zero_block,
  undefined_for_k1,
  nonfinite_loss,
  config_error,
  format_error,
  io_error,
};

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Err code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

using Rng = std::mt19937_64;

inline Matrix random_gaussian(Rng& rng, int rows, int cols) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

// Random SPSD matrix B*B^T / n, optionally rank-deficient.
inline Matrix random_spsd(Rng& rng, int n, int rank = -1) {
  int r = rank < 0 ? n : rank;
  Matrix b = random_gaussian(rng, n, r);
  return (b * b.transpose()) / static_cast<double>(n);
}

// Random SPD matrix with smallest eigenvalue bounded away from zero.
inline Matrix random_spd(Rng& rng, int n, double ridge = 0.1) {
  return random_spsd(rng, n) + ridge * Matrix::Identity(n, n);
}

}  // namespace sphere

#endif  // SPHERE_COMMON_HPP
