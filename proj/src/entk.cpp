// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "sphere/entk.hpp"

#include <algorithm>
#include <cmath>

namespace sphere::entk {

namespace {

// J^T v for the scalar projection: one reverse sweep with cotangent rows
// v_i * 1^T.
Vector vector_jacobian_product(const MoeModel& model, const ForwardTrace& trace, const Vector& v) {
  int n = trace.batch_size();
  require(v.size() == n, Err::shape_mismatch, "vjp: vector length != batch size");
  Matrix cot(n, model.config().output_dim);
  for (int i = 0; i < n; ++i) cot.row(i).setConstant(v(i));
  GradBundle g = moe::backward(model, trace, cot);
  return g.flatten(model);
}

double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

}  // namespace

EntkOperator::EntkOperator(const MoeModel& model, Matrix probe_batch)
    : model_(&model), batch_(std::move(probe_batch)) {
  require(batch_.rows() >= 1, Err::empty_input, "EntkOperator: empty probe batch");
  trace_ = moe::forward(*model_, batch_).trace;
}

Vector EntkOperator::apply(const Vector& v) const {
  ++applies_;
  Vector w = vector_jacobian_product(*model_, trace_, v);
  return moe::jacobian_vector_product(*model_, trace_, w);
}

SpsdMatrix exact_entk(const MoeModel& model, const Matrix& batch) {
  require(batch.rows() <= 512, Err::too_large, "exact_entk: N over cap");
  Matrix jac = moe::per_sample_jacobian(model, batch);
  return SpsdMatrix(jac * jac.transpose());
}

SpsdMatrix gauss_newton(const MoeModel& model, const Matrix& batch) {
  require(model.num_params() <= 4096, Err::too_large, "gauss_newton: P over cap");
  Matrix jac = moe::per_sample_jacobian(model, batch);
  return SpsdMatrix((jac.transpose() * jac) / static_cast<double>(batch.rows()));
}

double spectral_plasticity_exact(const MoeModel& model, const Matrix& probe_batch) {
  return spectral::effective_rank(exact_entk(model, probe_batch));
}

double slq_effective_rank(const LinearOp& op, int dim, const SlqConfig& cfg) {
  require(cfg.num_probes >= 1, Err::invalid_argument, "slq: num_probes must be >= 1");
  require(cfg.lanczos_steps >= 2, Err::invalid_argument, "slq: lanczos_steps must be >= 2");
  require(cfg.lanczos_steps <= dim, Err::invalid_argument, "slq: lanczos_steps > N");

  Rng rng(cfg.seed);
  double tr_acc = 0.0, trf_acc = 0.0;

  for (int probe = 0; probe < cfg.num_probes; ++probe) {
    Vector z = random_gaussian(rng, dim, 1).col(0);
    Vector q = z / z.norm();

    int m = cfg.lanczos_steps;
    std::vector<Vector> basis;  // kept for reorthogonalization
    Vector alpha(m), beta(m);
    alpha.setZero();
    beta.setZero();
    Vector q_prev = Vector::Zero(dim);
    double scale = 0.0;
    int steps = 0;

    for (int j = 0; j < m; ++j) {
      basis.push_back(q);
      Vector r = op(q);
      alpha(j) = q.dot(r);
      scale = std::max(scale, std::abs(alpha(j)));
      r -= alpha(j) * q;
      if (j > 0) r -= beta(j - 1) * q_prev;
      if (cfg.reorthogonalize)
        for (const Vector& b : basis) r -= b.dot(r) * b;
      steps = j + 1;
      if (j + 1 == m) break;
      double b = r.norm();
      if (b <= 1e-12 * std::max(scale, 1.0)) break;  // breakdown: exact subspace
      beta(j) = b;
      q_prev = q;
      q = r / b;
    }

    // Gauss quadrature from the tridiagonal: nodes are eigenvalues, weights
    // the squared first components.
    Matrix t = Matrix::Zero(steps, steps);
    for (int j = 0; j < steps; ++j) {
      t(j, j) = alpha(j);
      if (j + 1 < steps) {
        t(j, j + 1) = beta(j);
        t(j + 1, j) = beta(j);
      }
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(t);
    Vector nodes = es.eigenvalues();
    double node_max = nodes.cwiseAbs().maxCoeff();
    double tr_p = 0.0, trf_p = 0.0;
    for (int k = 0; k < steps; ++k) {
      double w = es.eigenvectors()(0, k) * es.eigenvectors()(0, k);
      double node = nodes(k) <= kEigClipRel * node_max ? 0.0 : nodes(k);
      tr_p += w * node;
      trf_p += w * xlogx(node);
    }
    // Normalized probes make E[q^T M q] = Tr(M)/dim.
    tr_acc += dim * tr_p;
    trf_acc += dim * trf_p;
  }

  double tr_est = tr_acc / cfg.num_probes;
  double trf_est = trf_acc / cfg.num_probes;
  require(tr_est > 0.0, Err::zero_spectrum, "slq: estimated trace is not positive");
  return std::exp(std::log(tr_est) - trf_est / tr_est);
}

double spectral_plasticity_slq(const EntkOperator& op, const SlqConfig& cfg) {
  return slq_effective_rank(op.as_fn(), op.dim(), cfg);
}

double functional_update_check(const MoeModel& model, const Matrix& batch,
                               const Vector& loss_cotangent, double eta) {
  require(eta >= 0.0, Err::invalid_argument, "functional_update_check: eta < 0");
  moe::ForwardResult before = moe::forward(model, batch);
  Vector g0 = before.outputs.rowwise().sum();

  Vector grad = vector_jacobian_product(model, before.trace, loss_cotangent);
  MoeModel stepped = model;
  stepped.unflatten(model.flatten() - eta * grad);
  Vector g1 = moe::forward(stepped, batch).outputs.rowwise().sum();

  Matrix k = exact_entk(model, batch).entries();
  Vector predicted = -eta * (k * loss_cotangent);
  return ((g1 - g0) - predicted).cwiseAbs().maxCoeff();
}

GnBlocks gn_partition(const MoeModel& model, const Matrix& batch) {
  Matrix jac = moe::per_sample_jacobian(model, batch);
  double n = static_cast<double>(batch.rows());
  const auto& lay = model.layout();
  const auto& cfg = model.config();

  GnBlocks out;
  Matrix jg = jac.leftCols(lay.gate_size);
  Matrix je = jac.rightCols(lay.expert_size);
  out.gate = (jg.transpose() * jg) / n;
  out.expert = (je.transpose() * je) / n;
  out.cross = (jg.transpose() * je) / n;
  out.trace = out.gate.trace() + out.expert.trace();

  auto layer_block = [&](const std::vector<int>& idx) {
    Matrix jl(jac.rows(), idx.size());
    for (size_t c = 0; c < idx.size(); ++c) jl.col(c) = jac.col(idx[c]);
    return Matrix((jl.transpose() * jl) / n);
  };

  int lg = model.num_gate_layers();
  int le = model.num_expert_layers();
  std::vector<SpsdMatrix> diag_blocks;
  out.nuclear_norms.resize(lg + le);
  for (int l = 0; l < lg; ++l) {
    out.gate_layer_blocks.push_back(layer_block(lay.gate_layer_indices(cfg, l)));
    diag_blocks.emplace_back(out.gate_layer_blocks.back());
    out.nuclear_norms(l) = diag_blocks.back().spectrum().sum();
  }
  for (int l = 0; l < le; ++l) {
    out.expert_layer_blocks.push_back(layer_block(lay.expert_layer_indices(cfg, l)));
    diag_blocks.emplace_back(out.expert_layer_blocks.back());
    out.nuclear_norms(lg + l) = diag_blocks.back().spectrum().sum();
  }

  double total = out.nuclear_norms.sum();
  require(total > 0.0, Err::zero_spectrum, "gn_partition: zero total nuclear norm");
  out.alpha = out.nuclear_norms / total;
  out.mixture_effrank = spectral::block_effrank_mixture(diag_blocks);
  return out;
}

GateExpertCosine gate_expert_block_cosine(const GnBlocks& blocks) {
  double gn = blocks.gate.norm();
  double en = blocks.expert.norm();
  double cn = blocks.cross.norm();
  // A vanished cross block has cosine 0 even when a within-block norm is
  // zero too (the E=1 degeneration); only a nonzero cross over a zero
  // within-block is ill-posed.
  if (cn == 0.0) return GateExpertCosine{0.0, 0.0, 0.0};
  require(gn > 0.0 && en > 0.0, Err::zero_block,
          "gate_expert_block_cosine: nonzero cross over a zero within-block");
  double cosine = cn / std::sqrt(gn * en);

  int p = static_cast<int>(blocks.gate.rows() + blocks.expert.rows());
  double delta_fro = std::sqrt(2.0) * cn;  // the cross block appears twice
  double eps = std::sqrt(static_cast<double>(p)) * delta_fro / blocks.trace;
  double bound;
  if (p <= 1) {
    bound = 0.0;
  } else if (eps > 1.0 - 1.0 / p) {
    bound = kInf;
  } else {
    bound = eps * std::log(static_cast<double>(p - 1)) + spectral::binary_entropy(eps);
  }
  return GateExpertCosine{cosine, eps, bound};
}

KronProxy kron_proxy(const SpsdMatrix& a, const SpsdMatrix& g, int k_l) {
  require(k_l >= 1, Err::invalid_argument, "kron_proxy: k_l must be >= 1");
  auto sa = a.spectrum();
  auto sg = g.spectrum();
  require(sa.min() > 0.0 && sg.min() > 0.0, Err::singular_input,
          "kron_proxy: factors must be SPD; ridge-shift first");
  double proxy = spectral::effective_rank(sa) * spectral::effective_rank(sg);
  double lb = k_l / (spectral::condition_number(sa) * spectral::condition_number(sg));
  return KronProxy{proxy, lb};
}

KfacResidual kfac_residual_bound(const std::vector<Vector>& token_features,
                                 const std::vector<Vector>& token_grads) {
  require(!token_features.empty(), Err::empty_input, "kfac_residual_bound: no tokens");
  require(token_features.size() == token_grads.size(), Err::shape_mismatch,
          "kfac_residual_bound: list lengths differ");
  int t = static_cast<int>(token_features.size());
  int da = static_cast<int>(token_features[0].size());
  int dg = static_cast<int>(token_grads[0].size());

  Matrix abar = Matrix::Zero(da, da), gbar = Matrix::Zero(dg, dg);
  for (int i = 0; i < t; ++i) {
    abar += token_features[i] * token_features[i].transpose();
    gbar += token_grads[i] * token_grads[i].transpose();
  }
  abar /= t;
  gbar /= t;

  // ||(1/T) sum (X_t - Xbar) (x) (Y_t - Ybar)||_F^2 expands into pairwise
  // Frobenius inner products of the centered factors; no Kronecker is formed.
  std::vector<Matrix> ca(t), cg(t);
  for (int i = 0; i < t; ++i) {
    cg[i] = token_grads[i] * token_grads[i].transpose() - gbar;
    ca[i] = token_features[i] * token_features[i].transpose() - abar;
  }
  double lhs_sq = 0.0, rms_a = 0.0, rms_g = 0.0;
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < t; ++j)
      lhs_sq += cg[i].cwiseProduct(cg[j]).sum() * ca[i].cwiseProduct(ca[j]).sum();
    rms_a += ca[i].squaredNorm();
    rms_g += cg[i].squaredNorm();
  }
  lhs_sq = std::max(lhs_sq, 0.0) / (static_cast<double>(t) * t);
  return KfacResidual{std::sqrt(lhs_sq), std::sqrt(rms_g / t) * std::sqrt(rms_a / t)};
}

double pearson(const Vector& x, const Vector& y) {
  require(x.size() == y.size() && x.size() >= 2, Err::invalid_argument, "pearson: bad lengths");
  double mx = x.mean(), my = y.mean();
  Vector cx = x.array() - mx, cy = y.array() - my;
  double sx = cx.norm(), sy = cy.norm();
  require(sx > 0.0 && sy > 0.0, Err::degenerate_variance, "pearson: constant series");
  return cx.dot(cy) / (sx * sy);
}

double proxy_target_correlation(const MoeModel& model, const std::vector<Matrix>& batches,
                                ProxyCorrelation mode) {
  require(batches.size() >= 10, Err::invalid_argument,
          "proxy_target_correlation: need at least 10 batches");
  int nb = static_cast<int>(batches.size());
  Vector proxy(nb), target(nb);
  int last = model.num_expert_layers() - 1;

  for (int b = 0; b < nb; ++b) {
    moe::ForwardResult fr = moe::forward(model, batches[b]);
    if (mode == ProxyCorrelation::feature_vs_entk) {
      Matrix phi = moe::weighted_feature_matrix(fr.trace, model, last, false);
      proxy(b) = spectral::effective_rank(moe::feature_gram(phi));
      target(b) = spectral::effective_rank(exact_entk(model, batches[b]));
    } else {
      Matrix cot = Matrix::Ones(batches[b].rows(), model.config().output_dim);
      GradBundle g = moe::backward(model, fr.trace, cot);
      Matrix phi = moe::weighted_feature_matrix(fr.trace, model, last, true);
      Matrix psi = moe::backprop_feature_matrix(g, fr.trace, model, last);
      double re_a = spectral::effective_rank(moe::feature_gram(phi));
      double re_g = spectral::effective_rank(moe::gradient_gram(psi));
      proxy(b) = re_a * re_g;
      target(b) = spectral::effective_rank(moe::expert_block_gram_exact(fr.trace, g, model, last));
    }
  }
  return pearson(proxy, target);
}

}  // namespace sphere::entk
