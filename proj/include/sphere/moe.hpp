// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Top-K mixture-of-experts MLP with exact manual reverse-mode gradients,
// per-sample Jacobian rows, and the gating-weighted feature / gradient Gram
// constructions consumed by the diagnostics and regularizer layers.
//
// All layers are bias-absorbed: weight matrices carry a trailing bias column
// and act on activations augmented with a constant 1. The global parameter
// flattening order is fixed and load-bearing (Jacobian column slicing in the
// diagnostics depends on it): gate layers first (l = 0..Lg-1), then experts
// in (e, l) order; each matrix is vectorized column-major.

#ifndef SPHERE_MOE_HPP
#define SPHERE_MOE_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sphere/common.hpp"
#include "sphere/spectral.hpp"

namespace sphere::moe {

enum class Activation { relu, tanh };

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

struct MoeConfig {
  int input_dim = 8;
  int output_dim = 4;
  int num_experts = 10;     // E
  int top_k = 2;            // K
  std::vector<int> expert_widths = {32, 32};
  std::vector<int> gate_widths = {32};
  double temperature = 1.0;  // tau; divides logits before selection and softmax
  Activation activation = Activation::relu;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static MoeConfig from_json(const nlohmann::json& j);
};

// Fixed column-major flattening of all weight matrices in documented order.
struct ParamLayout {
  std::vector<int> gate_offsets;                // per gate layer
  std::vector<std::vector<int>> expert_offsets; // [e][l]
  int gate_size = 0;    // P^g
  int expert_size = 0;  // P^exp
  int total = 0;        // P

  // Column index groups of the per-layer expert Jacobian J^exp_l
  // (union over experts of the (e, l) slices, in expert order).
  std::vector<int> expert_layer_indices(const MoeConfig& cfg, int layer) const;
  std::vector<int> gate_layer_indices(const MoeConfig& cfg, int layer) const;
};

class MoeModel {
 public:
  MoeModel(MoeConfig cfg, std::vector<Matrix> gate_weights,
           std::vector<std::vector<Matrix>> expert_weights);

  const MoeConfig& config() const { return cfg_; }
  const std::vector<Matrix>& gate_weights() const { return gate_; }
  const std::vector<std::vector<Matrix>>& expert_weights() const { return experts_; }
  Matrix& gate_weight(int l) { return gate_[l]; }
  Matrix& expert_weight(int e, int l) { return experts_[e][l]; }

  int num_gate_layers() const { return static_cast<int>(gate_.size()); }
  int num_expert_layers() const { return static_cast<int>(experts_[0].size()); }
  const ParamLayout& layout() const { return layout_; }
  int num_params() const { return layout_.total; }

  Vector flatten() const;
  void unflatten(const Vector& theta);

  nlohmann::json to_checkpoint() const;
  static MoeModel from_checkpoint(const nlohmann::json& j);

 private:
  MoeConfig cfg_;
  std::vector<Matrix> gate_;                 // W^g_l, each (d_l x (d_{l-1}+1))
  std::vector<std::vector<Matrix>> experts_; // W^exp_{e,l}
  ParamLayout layout_;
};

/// Fan-in-scaled uniform init, deterministic given cfg.seed; bias columns zero.
MoeModel init_model(const MoeConfig& cfg);

struct Routing {
  std::vector<int> selected;  // K indices of the largest logits, ascending
  Vector gating;              // h^(K): subset softmax on support, zeros elsewhere
};

/// Top-K selection (ties broken toward the lowest index) followed by the
/// subset softmax of logits / tau.
Routing topk_route(const Vector& logits, int k, double tau);

// Per-sample forward record: everything backward and the Gram builders need.
struct SampleTrace {
  Vector logits;                             // s(x), dim E
  std::vector<int> selected;                 // S(x)
  Vector gating;                             // h^(K), dim E
  std::vector<Vector> gate_inputs;           // a^g_{l-1}, un-augmented, per layer
  std::vector<Vector> gate_preacts;          // z^g_l
  // Expert intermediates are stored for selected experts only; index by
  // position in `selected`.
  std::vector<std::vector<Vector>> expert_inputs;   // [k][l]: a^exp_{e,l-1}
  std::vector<std::vector<Vector>> expert_preacts;  // [k][l]: z_{e,l}
  std::vector<Vector> expert_outputs;               // m_e(x), dim output_dim
};

struct ForwardTrace {
  std::vector<SampleTrace> samples;
  Matrix inputs;  // the batch that produced this trace

  int batch_size() const { return static_cast<int>(samples.size()); }
};

struct ForwardResult {
  Matrix outputs;  // N x output_dim
  ForwardTrace trace;
};

ForwardResult forward(const MoeModel& model, const Matrix& batch);

/// Accumulated parameter gradients plus the per-sample backprop vectors.
struct GradBundle {
  std::vector<Matrix> gate_grads;                 // same shapes as the model
  std::vector<std::vector<Matrix>> expert_grads;
  // Per-sample pre-activation backprop vectors. Gate: g^g_l = df/dz^g_l.
  // Expert: g^exp_{e,l} = d(u . m_e)/dz_{e,l}, stored for selected experts
  // (position-indexed like the trace); the h^(K) routing weight is NOT
  // folded in -- it multiplies on the feature side of every Gram.
  std::vector<std::vector<Vector>> gate_backprops;            // [i][l]
  std::vector<std::vector<std::vector<Vector>>> expert_backprops;  // [i][k][l]

  Vector flatten(const MoeModel& model) const;
};

/// Exact reverse-mode gradients of sum_i cotangent_i . f(x_i) with the top-K
/// selection held fixed (gradients flow through the subset-softmax values).
GradBundle backward(const MoeModel& model, const ForwardTrace& trace,
                    const Matrix& output_cotangent);

/// Cotangents injected at expert hidden-layer outputs, expressed against the
/// gating-weighted concatenated feature matrix Phi of that layer. Used to
/// differentiate feature-Gram penalties: gradients flow through both the
/// expert activations and the gating weights inside Phi.
struct FeatureCotangent {
  int layer;       // hidden expert layer index (1-based, 1..L_exp-1)
  Matrix cotangent;  // N x D_layer, D = E * width(layer)
};

/// Reverse pass combining an output cotangent with feature-level cotangents.
/// Either part may be zero; the result is the sum of both gradient paths.
GradBundle backward_extended(const MoeModel& model, const ForwardTrace& trace,
                             const Matrix& output_cotangent,
                             const std::vector<FeatureCotangent>& feature_cotangents);

/// One reverse sweep, two cotangent channels: returns the output-path and
/// feature-path gradients separately (the adaptive penalty weight needs both
/// norms without paying for two full passes).
std::pair<GradBundle, GradBundle> backward_pair(const MoeModel& model, const ForwardTrace& trace,
                                                const Matrix& output_cotangent,
                                                const std::vector<FeatureCotangent>& feats);

/// Parameter gradient of sum_i <dpsi_i, Psi_i> where Psi rows are the
/// backprop vectors g^exp at the last hidden pre-activation (weight layer
/// Le-2) produced by the fixed output cotangent u. Differentiates through
/// the activation curvature and the output weights; u itself is held
/// constant. Backbone of the backprop-Gram penalty variants.
GradBundle backward_through_backprops(const MoeModel& model, const ForwardTrace& trace,
                                      const Matrix& output_cotangent, int layer,
                                      const Matrix& dpsi);

/// Row n is the gradient of g(x_n) = 1^T f(x_n) with respect to all
/// parameters, flattened in the documented order.
Matrix per_sample_jacobian(const MoeModel& model, const Matrix& batch);

/// Forward-mode directional derivative: returns J * w restricted to the
/// scalar projection g(x) = 1^T f(x), one entry per sample.
Vector jacobian_vector_product(const MoeModel& model, const ForwardTrace& trace,
                               const Vector& w);

/// Gating-weighted concatenated feature matrix Phi_l: row i concatenates
/// h^(K)_{i,e} a^exp_{e,l}(x_i) over all experts. `layer` counts hidden
/// expert layers, 1-based. With include_bias each per-expert block carries
/// the constant-1 coordinate of the bias-absorbed representation (the form
/// entering the exact Jacobian Grams); the regularizer uses the plain form.
Matrix weighted_feature_matrix(const ForwardTrace& trace, const MoeModel& model, int layer,
                               bool include_bias = false);

/// Concatenated expert backprop matrix Psi_l: row i concatenates
/// g^exp_{e,l}(x_i) over experts (zero block when e is unselected).
Matrix backprop_feature_matrix(const GradBundle& bundle, const ForwardTrace& trace,
                               const MoeModel& model, int layer);

/// (1/N) Phi^T Phi as an SPSD matrix.
spectral::SpsdMatrix feature_gram(const Matrix& phi);
spectral::SpsdMatrix gradient_gram(const Matrix& psi);

/// Exact same-layer expert Gram: sum over samples of
/// h_e h_e' (a a'^T) (x) (g g'^T), assembled blockwise. Equals
/// (1/N) (J^exp_l)^T J^exp_l on the layer's Jacobian columns.
spectral::SpsdMatrix expert_block_gram_exact(const ForwardTrace& trace,
                                             const GradBundle& bundle,
                                             const MoeModel& model, int layer);

/// Per-expert feature dimensions of hidden layer `layer` (all equal here,
/// but kept explicit for block bookkeeping).
spectral::BlockPartition expert_feature_partition(const MoeModel& model, int layer);

}  // namespace sphere::moe

#endif  // SPHERE_MOE_HPP
