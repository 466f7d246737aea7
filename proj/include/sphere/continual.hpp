// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic continual supervised task streams, the isolated-vs-sequential
// training protocols, the training loop with the optional isotropy penalty,
// and the plasticity diagnostics battery.

#ifndef SPHERE_CONTINUAL_HPP
#define SPHERE_CONTINUAL_HPP

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sphere/entk.hpp"
#include "sphere/moe.hpp"
#include "sphere/regularizer.hpp"

namespace sphere::continual {

enum class StreamKind { rotating_regression, piecewise_classification };
enum class Protocol { isolated, sequential };
enum class LossKind { mse, softmax_ce };

StreamKind stream_kind_from_string(const std::string& s);
Protocol protocol_from_string(const std::string& s);
std::string to_string(StreamKind k);
std::string to_string(Protocol p);

/// One task: an input sampler, a target function, and a frozen eval set.
/// Regression tasks shift the input distribution and rotate/sign-flip the
/// teacher so every task is equally hard from scratch while consecutive
/// tasks conflict; classification tasks permute the cluster labels.
struct Task {
  int index = 0;
  LossKind loss = LossKind::mse;
  // Regression targets: y = signs o teacher_t(rotation * (x - input_shift)),
  // with the two-layer tanh teacher re-drawn per task: rotations alone leave
  // the task family first-layer-transferable, which masks plasticity loss.
  Matrix rotation;             // input_dim x input_dim, orthogonal
  Matrix teacher_w1;           // task teacher, bias-absorbed
  Matrix teacher_w2;
  Vector output_signs;         // regression only
  Vector input_shift;          // center of the task's input distribution
  std::vector<int> label_perm; // classification only
  Matrix centers;              // classification cluster centers
  Matrix eval_inputs;
  Matrix eval_targets;         // regression: targets; classification: one-hot
  double success_threshold = 0.0;  // per-point squared-error bar (regression)
  uint64_t data_seed = 0;
};

struct TaskStream {
  StreamKind kind = StreamKind::rotating_regression;
  int input_dim = 8;
  int output_dim = 4;
  std::vector<Task> tasks;

  Matrix sample_inputs(const Task& task, Rng& rng, int n) const;
  Matrix targets_for(const Task& task, const Matrix& inputs) const;
};

struct StreamConfig {
  StreamKind kind = StreamKind::rotating_regression;
  int num_tasks = 10;
  int steps_per_task = 2000;
  int batch_size = 64;
  int eval_size = 256;
  int input_dim = 8;
  int output_dim = 4;
  double teacher_scale = 1.5;  // weight scale of the regression teacher
  double shift_radius = 2.5;   // distance between task input distributions
  int teacher_rank = 2;        // input-subspace dim each task's targets use
  double success_rel_threshold = 0.3;  // success bar as a share of target variance
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static StreamConfig from_json(const nlohmann::json& j);
};

TaskStream generate_task_stream(const StreamConfig& cfg);

struct OptimizerConfig {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  double lr_start = 3e-4;
  double lr_end = 1e-4;   // linear decay over the first half of each task
  double grad_clip = 0.5; // global-norm cap
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
  moe::MoeConfig moe;
  reg::SphereConfig sphere;
  Protocol protocol = Protocol::sequential;
  OptimizerConfig optimizer;
  StreamConfig stream;
  std::vector<uint64_t> seeds = {0};
  uint64_t probe_seed = 9999;
  int probe_size = 64;
  int log_every = 200;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

struct SpecializationMetrics {
  double overlap = 0.0;        // mean cosine over selected expert pairs
  double orthogonality = 0.0;  // mean 1 - |cos|
  double max_vio = 0.0;        // max relative deviation from uniform load
  double active_ratio = 0.0;   // fraction of experts selected at least once
  double routing_entropy = 0.0;  // H(selection distribution) / log E
  Vector beta;                 // trace shares of the weighted feature Gram
};

struct LogPoint {
  int task = 0;
  int step = 0;         // global step index
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double success = 0.0;
  double re_k = 0.0;    // spectral plasticity on the frozen probe batch
  double dormant_ratio = 0.0;
  double feature_norm = 0.0;
  double grad_norm = 0.0;
  double penalty = 0.0;
  double lambda = 0.0;
  double step_time_ms = 0.0;
};

struct TaskFinal {
  int task = 0;
  double eval_loss = 0.0;
  double success = 0.0;
  double re_k = 0.0;
  SpecializationMetrics specialization;
};

struct MetricsRecord {
  uint64_t seed = 0;
  std::vector<LogPoint> log;
  std::vector<TaskFinal> task_finals;
  bool aborted = false;        // NonFiniteLoss
  std::string abort_reason;
};

/// First-moment / second-moment optimizer state over the flat parameters.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, int num_params);
  void step(Vector& theta, const Vector& grad, double lr);
  void reset();

 private:
  OptimizerConfig cfg_;
  Vector m_, v_;
  long t_ = 0;
};

double task_loss_value(LossKind kind, const Matrix& outputs, const Matrix& targets);
Matrix task_loss_cotangent(LossKind kind, const Matrix& outputs, const Matrix& targets);

struct EvalResult {
  double loss = 0.0;
  double success = 0.0;
};
EvalResult evaluate(const moe::MoeModel& model, const Task& task);

struct TrainTaskResult {
  std::vector<LogPoint> log;
  double mean_step_ms = 0.0;
};

/// Minibatch loop over one task: forward with trace, penalty per placement,
/// adaptive or fixed lambda, one optimizer step per batch on the total-loss
/// gradient, clipped at the configured global norm. Throws nonfinite_loss
/// when the loss leaves the reals.
TrainTaskResult train_on_task(moe::MoeModel& model, const TaskStream& stream, const Task& task,
                              const ExperimentConfig& cfg, Optimizer& opt, Rng& data_rng,
                              const Matrix& probe_batch, int global_step_base);

/// Full protocol for one seed: fresh init per task (isolated) or carried
/// parameters (sequential); per-task final eval immediately after its own
/// segment; spectral plasticity on the frozen probe batch at every log point.
MetricsRecord run_protocol(const TaskStream& stream, const ExperimentConfig& cfg, uint64_t seed);

/// Frozen probe batch from the first task's input distribution.
Matrix make_probe_batch(const TaskStream& stream, const ExperimentConfig& cfg);

double dormant_ratio(const moe::ForwardTrace& trace, const moe::MoeModel& model);
double feature_norm(const moe::ForwardTrace& trace, const moe::MoeModel& model);
double grad_norm(const moe::GradBundle& bundle, const moe::MoeModel& model);
SpecializationMetrics specialization_metrics(const moe::ForwardTrace& trace,
                                             const moe::MoeModel& model);

}  // namespace sphere::continual

#endif  // SPHERE_CONTINUAL_HPP
