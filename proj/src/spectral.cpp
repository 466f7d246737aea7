// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "sphere/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sphere::spectral {

namespace {

// Entropy of a trace-normalized non-negative spectrum, in nats.
double spectrum_entropy(const Vector& values, double total) {
  double h = 0.0;
  for (int i = 0; i < values.size(); ++i) {
    if (values(i) <= 0.0) continue;
    double p = values(i) / total;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace

Spectrum::Spectrum(Vector values) : values_(std::move(values)) {
  for (int i = 0; i < values_.size(); ++i) {
    require(values_(i) >= 0.0, Err::invalid_argument, "Spectrum: negative eigenvalue");
    if (i > 0)
      require(values_(i) <= values_(i - 1), Err::invalid_argument, "Spectrum: not sorted");
  }
}

SpsdMatrix::SpsdMatrix(Matrix entries) {
  require(entries.rows() == entries.cols(), Err::shape_mismatch, "SpsdMatrix: not square");
  require(entries.rows() >= 1, Err::invalid_argument, "SpsdMatrix: empty");
  double scale = entries.cwiseAbs().maxCoeff();
  double asym = (entries - entries.transpose()).cwiseAbs().maxCoeff();
  require(asym <= 1e-12 * std::max(scale, 1e-300), Err::invalid_argument,
          "SpsdMatrix: asymmetry exceeds 1e-12 * max|M|");
  entries_ = 0.5 * (entries + entries.transpose());
}

Spectrum SpsdMatrix::spectrum() const {
  require(dim() <= kMaxDenseDim, Err::too_large, "SpsdMatrix: dense eigensolve cap exceeded");
  Eigen::SelfAdjointEigenSolver<Matrix> es(entries_, Eigen::EigenvaluesOnly);
  Vector up = es.eigenvalues();  // ascending
  double tr = std::max(trace(), 0.0);
  double clip = kEigClipRel * tr;
  Vector down(up.size());
  for (int i = 0; i < up.size(); ++i) {
    double v = up(up.size() - 1 - i);
    require(v >= -kNegEigTolRel * std::max(tr, 1e-300), Err::invalid_argument,
            "SpsdMatrix: eigenvalue below -1e-10 * trace");
    down(i) = v <= clip ? 0.0 : v;
  }
  return Spectrum(down);
}

int BlockPartition::total() const { return std::accumulate(block_sizes.begin(), block_sizes.end(), 0); }

int BlockPartition::offset(int b) const {
  return std::accumulate(block_sizes.begin(), block_sizes.begin() + b, 0);
}

void BlockPartition::check_matches(int dim) const {
  require(!block_sizes.empty(), Err::invalid_argument, "BlockPartition: empty");
  for (int s : block_sizes)
    require(s > 0, Err::invalid_argument, "BlockPartition: non-positive block size");
  require(total() == dim, Err::partition_mismatch, "BlockPartition: sizes do not sum to dim");
}

double effective_rank(const Spectrum& s) {
  double total = s.sum();
  require(total > 0.0, Err::zero_spectrum, "effective_rank: all eigenvalues clip to zero");
  return std::exp(spectrum_entropy(s.values(), total));
}

double effective_rank(const SpsdMatrix& m) { return effective_rank(m.spectrum()); }

double condition_number(const Spectrum& s) {
  if (s.min() <= 0.0) return kInf;
  return s.max() / s.min();
}

double condition_number(const SpsdMatrix& m) { return condition_number(m.spectrum()); }

SpsdMatrix ridge_shift(const SpsdMatrix& m, double eps) {
  require(eps > 0.0, Err::invalid_argument, "ridge_shift: eps must be > 0");
  return SpsdMatrix(m.entries() + eps * Matrix::Identity(m.dim(), m.dim()));
}

SpsdMatrix kronecker(const SpsdMatrix& a, const SpsdMatrix& b) {
  int na = a.dim(), nb = b.dim();
  Matrix out(na * nb, na * nb);
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < na; ++j)
      out.block(i * nb, j * nb, nb, nb) = a.entries()(i, j) * b.entries();
  return SpsdMatrix(std::move(out));
}

SpsdMatrix block_direct_sum(const std::vector<SpsdMatrix>& blocks) {
  require(!blocks.empty(), Err::empty_input, "block_direct_sum: empty block list");
  int n = 0;
  for (const auto& b : blocks) n += b.dim();
  Matrix out = Matrix::Zero(n, n);
  int off = 0;
  for (const auto& b : blocks) {
    out.block(off, off, b.dim(), b.dim()) = b.entries();
    off += b.dim();
  }
  return SpsdMatrix(std::move(out));
}

double block_effrank_mixture(const std::vector<SpsdMatrix>& blocks) {
  require(!blocks.empty(), Err::empty_input, "block_effrank_mixture: empty block list");
  std::vector<Spectrum> spectra;
  spectra.reserve(blocks.size());
  double total = 0.0;
  for (const auto& b : blocks) {
    spectra.push_back(b.spectrum());
    total += spectra.back().sum();  // nuclear norm of an SPSD block
  }
  require(total > 0.0, Err::zero_spectrum, "block_effrank_mixture: zero total nuclear norm");
  double log_re = 0.0;
  for (const auto& s : spectra) {
    double share = s.sum() / total;
    if (share <= 0.0) continue;
    log_re += -share * std::log(share) + share * std::log(effective_rank(s));
  }
  return std::exp(log_re);
}

SpsdMatrix spectral_contraction_step(const SpsdMatrix& m, double beta) {
  require(beta >= 0.0 && beta <= 1.0, Err::invalid_argument,
          "spectral_contraction_step: beta outside [0,1]");
  double mean = m.trace() / m.dim();
  return SpsdMatrix((1.0 - beta) * m.entries() + beta * mean * Matrix::Identity(m.dim(), m.dim()));
}

SpsdMatrix khatri_rao_block(const SpsdMatrix& a, const SpsdMatrix& g,
                            const BlockPartition& pa, const BlockPartition& pg) {
  pa.check_matches(a.dim());
  pg.check_matches(g.dim());
  require(pa.num_blocks() == pg.num_blocks(), Err::partition_mismatch,
          "khatri_rao_block: block counts differ");
  int num = pa.num_blocks();
  int n = 0;
  for (int e = 0; e < num; ++e) n += pa.block_sizes[e] * pg.block_sizes[e];
  Matrix out(n, n);
  int row = 0;
  for (int e = 0; e < num; ++e) {
    int col = 0;
    int me = pa.block_sizes[e], ne = pg.block_sizes[e];
    for (int f = 0; f < num; ++f) {
      int mf = pa.block_sizes[f], nf = pg.block_sizes[f];
      Matrix ab = a.entries().block(pa.offset(e), pa.offset(f), me, mf);
      Matrix gb = g.entries().block(pg.offset(e), pg.offset(f), ne, nf);
      for (int i = 0; i < me; ++i)
        for (int j = 0; j < mf; ++j)
          out.block(row + i * ne, col + j * nf, ne, nf) = ab(i, j) * gb;
      col += mf * nf;
    }
    row += me * ne;
  }
  return SpsdMatrix(std::move(out));
}

TracySinghResult tracy_singh(const SpsdMatrix& a, const SpsdMatrix& g,
                             const BlockPartition& pa, const BlockPartition& pg) {
  pa.check_matches(a.dim());
  pg.check_matches(g.dim());
  require(pa.num_blocks() == pg.num_blocks(), Err::partition_mismatch,
          "tracy_singh: block counts differ");
  int na = a.dim(), ng = g.dim();
  require(na * ng <= 64, Err::dim_too_large, "tracy_singh: product dim capped at 64");

  int num = pa.num_blocks();
  int n = na * ng;
  // Row layout: outer by A-block e, then G-block f, then Kronecker (i,j)
  // within the pair. Columns mirror rows.
  auto pair_offset = [&](int e, int f) {
    int off = 0;
    for (int ee = 0; ee < e; ++ee) off += pa.block_sizes[ee] * ng;
    for (int ff = 0; ff < f; ++ff) off += pa.block_sizes[e] * pg.block_sizes[ff];
    return off;
  };

  Matrix out(n, n);
  for (int e = 0; e < num; ++e)
    for (int f = 0; f < num; ++f)
      for (int e2 = 0; e2 < num; ++e2)
        for (int f2 = 0; f2 < num; ++f2) {
          int me = pa.block_sizes[e], nf = pg.block_sizes[f];
          int me2 = pa.block_sizes[e2], nf2 = pg.block_sizes[f2];
          Matrix ab = a.entries().block(pa.offset(e), pa.offset(e2), me, me2);
          Matrix gb = g.entries().block(pg.offset(f), pg.offset(f2), nf, nf2);
          int r0 = pair_offset(e, f), c0 = pair_offset(e2, f2);
          for (int i = 0; i < me; ++i)
            for (int j = 0; j < me2; ++j)
              out.block(r0 + i * nf, c0 + j * nf2, nf, nf2) = ab(i, j) * gb;
        }

  // Diagonal block pairs (e, e) give the Khatri-Rao principal submatrix.
  std::vector<int> sel;
  for (int e = 0; e < num; ++e) {
    int base = pair_offset(e, e);
    for (int i = 0; i < pa.block_sizes[e] * pg.block_sizes[e]; ++i) sel.push_back(base + i);
  }
  return TracySinghResult{SpsdMatrix(std::move(out)), std::move(sel)};
}

InterlacingBound interlacing_lower_bound(const SpsdMatrix& m, const std::vector<int>& keep) {
  require(!keep.empty(), Err::empty_input, "interlacing_lower_bound: empty index list");
  Spectrum s = m.spectrum();
  require(s.min() > 0.0, Err::singular_input,
          "interlacing_lower_bound: matrix is singular; ridge-shift first");
  double kappa = s.max() / s.min();
  int k = static_cast<int>(keep.size());
  Matrix sub(k, k);
  for (int i = 0; i < k; ++i) {
    require(keep[i] >= 0 && keep[i] < m.dim(), Err::invalid_argument,
            "interlacing_lower_bound: index out of range");
    for (int j = 0; j < k; ++j) sub(i, j) = m.entries()(keep[i], keep[j]);
  }
  double actual = effective_rank(SpsdMatrix(std::move(sub)));
  return InterlacingBound{k / kappa, actual, std::abs(kappa - 1.0) <= 1e-12};
}

double binary_entropy(double x) {
  double h = 0.0;
  if (x > 0.0) h -= x * std::log(x);
  if (x < 1.0) h -= (1.0 - x) * std::log(1.0 - x);
  return h;
}

namespace {

// eps log(n-1) + h(eps) when eps <= 1 - 1/n, else +inf. The n = 1 case is
// degenerate: both spectra are the point mass, so the bound is 0.
double fannes_bound(double eps, int n) {
  if (n <= 1) return 0.0;
  if (eps > 1.0 - 1.0 / n) return kInf;
  double logterm = n >= 2 ? std::log(static_cast<double>(n - 1)) : 0.0;
  return eps * logterm + binary_entropy(eps);
}

}  // namespace

EffrankStabilityBound effrank_stability_bound(const SpsdMatrix& k, const SpsdMatrix& kt) {
  require(k.dim() == kt.dim(), Err::shape_mismatch, "effrank_stability_bound: dims differ");
  double trk = k.trace(), trt = kt.trace();
  require(trk > 0.0 && trt > 0.0, Err::zero_trace, "effrank_stability_bound: zero trace");
  int n = k.dim();
  double fro = (k.entries() - kt.entries()).norm();
  double eps = std::sqrt(static_cast<double>(n)) * fro / std::min(trk, trt);
  double gap = std::abs(std::log(effective_rank(k)) - std::log(effective_rank(kt)));
  return EffrankStabilityBound{eps, fannes_bound(eps, n), gap};
}

CrossCouplingBounds cross_coupling_bounds(const SpsdMatrix& a, const BlockPartition& p) {
  p.check_matches(a.dim());
  double tr = a.trace();
  require(tr > 0.0, Err::zero_trace, "cross_coupling_bounds: zero trace");
  int n = a.dim();

  Matrix bd = Matrix::Zero(n, n);
  for (int e = 0; e < p.num_blocks(); ++e) {
    int off = p.offset(e), sz = p.block_sizes[e];
    bd.block(off, off, sz, sz) = a.entries().block(off, off, sz, sz);
  }
  Matrix delta = a.entries() - bd;

  double eps = std::sqrt(static_cast<double>(n)) * delta.norm() / tr;
  double effrank_bound = fannes_bound(eps, n);

  // Weyl control needs the raw extreme eigenvalues of the block-diagonal part
  // and the spectral norm of the (symmetric) coupling.
  Eigen::SelfAdjointEigenSolver<Matrix> es_bd(bd, Eigen::EigenvaluesOnly);
  Eigen::SelfAdjointEigenSolver<Matrix> es_d(delta, Eigen::EigenvaluesOnly);
  double lo = es_bd.eigenvalues()(0), hi = es_bd.eigenvalues()(n - 1);
  double dnorm = es_d.eigenvalues().cwiseAbs().maxCoeff();
  double kappa_bound = (lo - dnorm > 0.0) ? (hi + dnorm) / (lo - dnorm) : kInf;

  double gap = std::abs(std::log(effective_rank(a)) - std::log(effective_rank(SpsdMatrix(bd))));
  return CrossCouplingBounds{eps, effrank_bound, kappa_bound, gap};
}

Vector routing_trace_weights(const SpsdMatrix& a, const BlockPartition& p) {
  p.check_matches(a.dim());
  double tr = a.trace();
  require(tr > 0.0, Err::zero_trace, "routing_trace_weights: zero trace");
  Vector beta(p.num_blocks());
  for (int e = 0; e < p.num_blocks(); ++e) {
    int off = p.offset(e), sz = p.block_sizes[e];
    beta(e) = a.entries().block(off, off, sz, sz).trace() / tr;
  }
  return beta;
}

}  // namespace sphere::spectral
