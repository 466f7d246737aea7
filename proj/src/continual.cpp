// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "sphere/continual.hpp"

#include <chrono>
#include <cmath>

namespace sphere::continual {

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t x = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

Matrix random_orthogonal(Rng& rng, int n) {
  Matrix q = Eigen::HouseholderQR<Matrix>(random_gaussian(rng, n, n)).householderQ();
  return q;
}

Vector teacher_eval(const Task& task, const Vector& x) {
  Vector a(x.size() + 1);
  a.head(x.size()) = x;
  a(x.size()) = 1.0;
  Vector h = (task.teacher_w1 * a).array().tanh();
  Vector ht(h.size() + 1);
  ht.head(h.size()) = h;
  ht(h.size()) = 1.0;
  return task.teacher_w2 * ht;
}

}  // namespace

StreamKind stream_kind_from_string(const std::string& s) {
  if (s == "rotating_regression") return StreamKind::rotating_regression;
  if (s == "piecewise_classification") return StreamKind::piecewise_classification;
  fail(Err::config_error, "unknown stream kind: " + s);
}

Protocol protocol_from_string(const std::string& s) {
  if (s == "isolated") return Protocol::isolated;
  if (s == "sequential") return Protocol::sequential;
  fail(Err::config_error, "unknown protocol: " + s);
}

std::string to_string(StreamKind k) {
  return k == StreamKind::rotating_regression ? "rotating_regression" : "piecewise_classification";
}

std::string to_string(Protocol p) { return p == Protocol::isolated ? "isolated" : "sequential"; }

nlohmann::json StreamConfig::to_json() const {
  return {{"kind", to_string(kind)},       {"num_tasks", num_tasks},
          {"steps_per_task", steps_per_task}, {"batch_size", batch_size},
          {"eval_size", eval_size},        {"input_dim", input_dim},
          {"output_dim", output_dim},      {"teacher_scale", teacher_scale},
          {"shift_radius", shift_radius},  {"teacher_rank", teacher_rank},
          {"success_rel_threshold", success_rel_threshold}, {"seed", seed}};
}

StreamConfig StreamConfig::from_json(const nlohmann::json& j) {
  StreamConfig cfg;
  if (j.contains("kind")) cfg.kind = stream_kind_from_string(j["kind"]);
  cfg.num_tasks = j.value("num_tasks", cfg.num_tasks);
  cfg.steps_per_task = j.value("steps_per_task", cfg.steps_per_task);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.eval_size = j.value("eval_size", cfg.eval_size);
  cfg.input_dim = j.value("input_dim", cfg.input_dim);
  cfg.output_dim = j.value("output_dim", cfg.output_dim);
  cfg.teacher_scale = j.value("teacher_scale", cfg.teacher_scale);
  cfg.shift_radius = j.value("shift_radius", cfg.shift_radius);
  cfg.teacher_rank = j.value("teacher_rank", cfg.teacher_rank);
  cfg.success_rel_threshold = j.value("success_rel_threshold", cfg.success_rel_threshold);
  cfg.seed = j.value("seed", cfg.seed);
  return cfg;
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"kind", kind == Kind::adam ? "adam" : "sgd"},
          {"lr_start", lr_start},
          {"lr_end", lr_end},
          {"grad_clip", grad_clip}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig cfg;
  if (j.contains("kind")) {
    std::string k = j["kind"].get<std::string>();
    require(k == "adam" || k == "sgd", Err::config_error, "optimizer kind must be adam or sgd");
    cfg.kind = k == "adam" ? Kind::adam : Kind::sgd;
  }
  cfg.lr_start = j.value("lr_start", cfg.lr_start);
  cfg.lr_end = j.value("lr_end", cfg.lr_end);
  cfg.grad_clip = j.value("grad_clip", cfg.grad_clip);
  return cfg;
}

void ExperimentConfig::validate() const {
  moe.validate();
  sphere.validate();
  require(!seeds.empty(), Err::config_error, "ExperimentConfig: seeds must be non-empty");
  require(stream.num_tasks >= 2, Err::config_error, "ExperimentConfig: need at least 2 tasks");
  require(stream.input_dim == moe.input_dim && stream.output_dim == moe.output_dim,
          Err::config_error, "ExperimentConfig: stream dims must match the model");
  require(probe_size >= 2, Err::config_error, "ExperimentConfig: probe_size too small");
  require(log_every >= 1, Err::config_error, "ExperimentConfig: log_every must be >= 1");
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"moe", moe.to_json()},
          {"sphere", sphere.to_json()},
          {"protocol", to_string(protocol)},
          {"optimizer", optimizer.to_json()},
          {"stream", stream.to_json()},
          {"seeds", seeds},
          {"probe_seed", probe_seed},
          {"probe_size", probe_size},
          {"log_every", log_every}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  if (j.contains("moe")) cfg.moe = moe::MoeConfig::from_json(j["moe"]);
  if (j.contains("sphere")) cfg.sphere = reg::SphereConfig::from_json(j["sphere"]);
  if (j.contains("protocol")) cfg.protocol = protocol_from_string(j["protocol"]);
  if (j.contains("optimizer")) cfg.optimizer = OptimizerConfig::from_json(j["optimizer"]);
  if (j.contains("stream")) cfg.stream = StreamConfig::from_json(j["stream"]);
  if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<uint64_t>>();
  cfg.probe_seed = j.value("probe_seed", cfg.probe_seed);
  cfg.probe_size = j.value("probe_size", cfg.probe_size);
  cfg.log_every = j.value("log_every", cfg.log_every);
  cfg.validate();
  return cfg;
}

Matrix TaskStream::sample_inputs(const Task& task, Rng& rng, int n) const {
  if (kind == StreamKind::rotating_regression) {
    Matrix x = random_gaussian(rng, n, input_dim);
    x.rowwise() += task.input_shift.transpose();
    return x;
  }
  // Cluster mixture for the classification stream.
  Matrix x(n, input_dim);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(task.centers.rows()) - 1);
  for (int i = 0; i < n; ++i)
    x.row(i) = task.centers.row(pick(rng)) + 0.5 * random_gaussian(rng, 1, input_dim).row(0);
  return x;
}

Matrix TaskStream::targets_for(const Task& task, const Matrix& inputs) const {
  int n = static_cast<int>(inputs.rows());
  Matrix y = Matrix::Zero(n, output_dim);
  if (kind == StreamKind::rotating_regression) {
    for (int i = 0; i < n; ++i) {
      // The task's targets see the input only through the leading
      // teacher-rank coordinates of the rotated frame.
      Vector centered = task.rotation * (inputs.row(i).transpose() - task.input_shift);
      Vector t = teacher_eval(task, centered.head(task.teacher_w1.cols() - 1));
      y.row(i) = (task.output_signs.array() * t.array()).transpose();
    }
    return y;
  }
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double bestd = kInf;
    for (int c = 0; c < task.centers.rows(); ++c) {
      double d = (inputs.row(i) - task.centers.row(c)).squaredNorm();
      if (d < bestd) {
        bestd = d;
        best = c;
      }
    }
    y(i, task.label_perm[best]) = 1.0;  // one-hot
  }
  return y;
}

TaskStream generate_task_stream(const StreamConfig& cfg) {
  require(cfg.num_tasks >= 2, Err::invalid_argument, "generate_task_stream: need >= 2 tasks");
  TaskStream stream;
  stream.kind = cfg.kind;
  stream.input_dim = cfg.input_dim;
  stream.output_dim = cfg.output_dim;

  require(cfg.teacher_rank >= 1 && cfg.teacher_rank <= cfg.input_dim, Err::invalid_argument,
          "generate_task_stream: teacher_rank outside [1, input_dim]");
  Rng rng(cfg.seed);
  int hidden = 2 * cfg.input_dim;
  double w1_scale = cfg.teacher_scale / std::sqrt(static_cast<double>(cfg.teacher_rank));
  double w2_scale = cfg.teacher_scale / std::sqrt(static_cast<double>(hidden));

  Matrix centers = 2.5 * random_gaussian(rng, cfg.output_dim, cfg.input_dim);

  std::vector<int> prev_perm;
  for (int t = 0; t < cfg.num_tasks; ++t) {
    Task task;
    task.index = t;
    task.data_seed = mix_seed(cfg.seed, 7000 + t);
    if (cfg.kind == StreamKind::rotating_regression) {
      task.loss = LossKind::mse;
      task.rotation = random_orthogonal(rng, cfg.input_dim);
      task.teacher_w1 = w1_scale * random_gaussian(rng, hidden, cfg.teacher_rank + 1);
      task.teacher_w2 = w2_scale * random_gaussian(rng, cfg.output_dim, hidden + 1);
      task.output_signs = Vector::Ones(cfg.output_dim);
      std::uniform_real_distribution<double> coin(0.0, 1.0);
      for (int d = 0; d < cfg.output_dim; ++d)
        if (coin(rng) < 0.5) task.output_signs(d) = -1.0;
      Vector dir = random_gaussian(rng, cfg.input_dim, 1).col(0);
      task.input_shift = cfg.shift_radius * dir / dir.norm();
    } else {
      task.loss = LossKind::softmax_ce;
      task.centers = centers;
      std::vector<int> perm(cfg.output_dim);
      for (int c = 0; c < cfg.output_dim; ++c) perm[c] = c;
      do {
        std::shuffle(perm.begin(), perm.end(), rng);
      } while (perm == prev_perm);  // consecutive tasks must differ
      prev_perm = perm;
      task.label_perm = perm;
    }

    Rng eval_rng(task.data_seed);
    stream.tasks.push_back(task);
    Task& stored = stream.tasks.back();
    stored.eval_inputs = stream.sample_inputs(stored, eval_rng, cfg.eval_size);
    stored.eval_targets = stream.targets_for(stored, stored.eval_inputs);
    if (cfg.kind == StreamKind::rotating_regression) {
      Vector mean = stored.eval_targets.colwise().mean().transpose();
      double var = 0.0;
      for (int i = 0; i < stored.eval_targets.rows(); ++i)
        var += (stored.eval_targets.row(i).transpose() - mean).squaredNorm();
      var /= stored.eval_targets.rows();
      stored.success_threshold = cfg.success_rel_threshold * var;
    }
  }
  return stream;
}

Optimizer::Optimizer(const OptimizerConfig& cfg, int num_params)
    : cfg_(cfg), m_(Vector::Zero(num_params)), v_(Vector::Zero(num_params)) {}

void Optimizer::reset() {
  m_.setZero();
  v_.setZero();
  t_ = 0;
}

void Optimizer::step(Vector& theta, const Vector& grad, double lr) {
  if (cfg_.kind == OptimizerConfig::Kind::sgd) {
    theta -= lr * grad;
    return;
  }
  ++t_;
  m_ = cfg_.adam_beta1 * m_ + (1.0 - cfg_.adam_beta1) * grad;
  v_ = cfg_.adam_beta2 * v_ + (1.0 - cfg_.adam_beta2) * grad.cwiseProduct(grad);
  double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
  Vector mhat = m_ / bc1;
  Vector vhat = v_ / bc2;
  theta -= lr * mhat.cwiseQuotient(vhat.cwiseSqrt().array().max(0.0).matrix() +
                                   Vector::Constant(theta.size(), cfg_.adam_eps));
}

double task_loss_value(LossKind kind, const Matrix& outputs, const Matrix& targets) {
  int n = static_cast<int>(outputs.rows());
  if (kind == LossKind::mse) return (outputs - targets).squaredNorm() / n;
  // Softmax cross-entropy against one-hot targets.
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    Vector z = outputs.row(i).transpose();
    double mx = z.maxCoeff();
    double lse = mx + std::log((z.array() - mx).exp().sum());
    loss -= targets.row(i).dot(z.transpose()) - lse;
  }
  return loss / n;
}

Matrix task_loss_cotangent(LossKind kind, const Matrix& outputs, const Matrix& targets) {
  int n = static_cast<int>(outputs.rows());
  if (kind == LossKind::mse) return 2.0 * (outputs - targets) / n;
  Matrix cot(outputs.rows(), outputs.cols());
  for (int i = 0; i < n; ++i) {
    Vector z = outputs.row(i).transpose();
    double mx = z.maxCoeff();
    Vector p = (z.array() - mx).exp();
    p /= p.sum();
    cot.row(i) = (p.transpose() - targets.row(i)) / n;
  }
  return cot;
}

EvalResult evaluate(const moe::MoeModel& model, const Task& task) {
  moe::ForwardResult fr = moe::forward(model, task.eval_inputs);
  EvalResult res;
  res.loss = task_loss_value(task.loss, fr.outputs, task.eval_targets);
  int n = static_cast<int>(fr.outputs.rows());
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    if (task.loss == LossKind::mse) {
      hits += (fr.outputs.row(i) - task.eval_targets.row(i)).squaredNorm() <
              task.success_threshold;
    } else {
      int pred, label;
      fr.outputs.row(i).maxCoeff(&pred);
      task.eval_targets.row(i).maxCoeff(&label);
      hits += pred == label;
    }
  }
  res.success = static_cast<double>(hits) / n;
  return res;
}

double dormant_ratio(const moe::ForwardTrace& trace, const moe::MoeModel& model) {
  Matrix phi = moe::weighted_feature_matrix(trace, model, model.num_expert_layers() - 1);
  Vector mean_abs = phi.cwiseAbs().colwise().mean().transpose();
  double layer_mean = mean_abs.mean();
  if (layer_mean <= 0.0) return 1.0;
  int dormant = 0;
  for (int j = 0; j < mean_abs.size(); ++j) dormant += mean_abs(j) <= 1e-6 * layer_mean;
  return static_cast<double>(dormant) / mean_abs.size();
}

double feature_norm(const moe::ForwardTrace& trace, const moe::MoeModel& model) {
  return moe::weighted_feature_matrix(trace, model, model.num_expert_layers() - 1).norm();
}

double grad_norm(const moe::GradBundle& bundle, const moe::MoeModel& model) {
  return bundle.flatten(model).norm();
}

SpecializationMetrics specialization_metrics(const moe::ForwardTrace& trace,
                                             const moe::MoeModel& model) {
  const auto& cfg = model.config();
  require(cfg.top_k >= 2, Err::undefined_for_k1,
          "specialization_metrics: pair metrics need K >= 2");
  int le = model.num_expert_layers();
  int n = trace.batch_size();

  SpecializationMetrics out;
  double cos_sum = 0.0, orth_sum = 0.0;
  long pairs = 0;
  std::vector<long> counts(cfg.num_experts, 0);
  for (int i = 0; i < n; ++i) {
    const auto& st = trace.samples[i];
    for (int k = 0; k < cfg.top_k; ++k) counts[st.selected[k]] += 1;
    for (int k1 = 0; k1 < cfg.top_k; ++k1)
      for (int k2 = k1 + 1; k2 < cfg.top_k; ++k2) {
        const Vector& f1 = st.expert_inputs[k1][le - 1];
        const Vector& f2 = st.expert_inputs[k2][le - 1];
        double n1 = f1.norm(), n2 = f2.norm();
        double c = (n1 > 0 && n2 > 0) ? f1.dot(f2) / (n1 * n2) : 0.0;
        cos_sum += c;
        orth_sum += 1.0 - std::abs(c);
        ++pairs;
      }
  }
  out.overlap = cos_sum / pairs;
  out.orthogonality = orth_sum / pairs;

  double total = 0.0, cbar = 0.0;
  for (long c : counts) total += c;
  cbar = total / cfg.num_experts;
  double maxvio = 0.0;
  int active = 0;
  double entropy = 0.0;
  for (long c : counts) {
    maxvio = std::max(maxvio, std::abs(c - cbar) / cbar);
    active += c > 0;
    if (c > 0) {
      double p = c / total;
      entropy -= p * std::log(p);
    }
  }
  out.max_vio = maxvio;
  out.active_ratio = static_cast<double>(active) / cfg.num_experts;
  out.routing_entropy = cfg.num_experts > 1 ? entropy / std::log(cfg.num_experts) : 1.0;

  Matrix phi = moe::weighted_feature_matrix(trace, model, le - 1);
  auto gram = moe::feature_gram(phi);
  if (gram.trace() > 0.0)
    out.beta = spectral::routing_trace_weights(gram, moe::expert_feature_partition(model, le - 1));
  else
    out.beta = Vector::Zero(cfg.num_experts);
  return out;
}

Matrix make_probe_batch(const TaskStream& stream, const ExperimentConfig& cfg) {
  Rng rng(cfg.probe_seed);
  return stream.sample_inputs(stream.tasks.front(), rng, cfg.probe_size);
}

TrainTaskResult train_on_task(moe::MoeModel& model, const TaskStream& stream, const Task& task,
                              const ExperimentConfig& cfg, Optimizer& opt, Rng& data_rng,
                              const Matrix& probe_batch, int global_step_base) {
  using Clock = std::chrono::steady_clock;
  const auto& scfg = cfg.stream;
  bool use_penalty = cfg.sphere.ratio != 0.0 || cfg.sphere.fixed_lambda.has_value();
  int le = model.num_expert_layers();
  int half = std::max(scfg.steps_per_task / 2, 1);

  TrainTaskResult res;
  Vector theta = model.flatten();
  double window_ms = 0.0;
  int window_steps = 0;
  double total_ms = 0.0;

  for (int step = 0; step < scfg.steps_per_task; ++step) {
    auto t0 = Clock::now();
    Matrix x = stream.sample_inputs(task, data_rng, scfg.batch_size);
    Matrix y = stream.targets_for(task, x);
    moe::ForwardResult fr = moe::forward(model, x);
    double loss = task_loss_value(task.loss, fr.outputs, y);
    require(std::isfinite(loss), Err::nonfinite_loss, "train_on_task: non-finite task loss");
    Matrix cot = task_loss_cotangent(task.loss, fr.outputs, y);

    double penalty = 0.0, lambda = 0.0, gnorm = 0.0;
    Vector grad;
    if (!use_penalty) {
      moe::GradBundle task_b = moe::backward(model, fr.trace, cot);
      grad = task_b.flatten(model);
      gnorm = grad.norm();
    } else {
      moe::GradBundle task_b, pen_b;
      switch (cfg.sphere.variant) {
        case reg::Variant::weighted_concat:
        case reg::Variant::per_expert_sum: {
          auto layers = reg::placement_layers(model, cfg.sphere);
          std::vector<Matrix> phis;
          for (int l : layers) phis.push_back(moe::weighted_feature_matrix(fr.trace, model, l));
          auto cots = reg::total_loss_cotangents(phis, cfg.sphere, model.config().num_experts);
          std::vector<moe::FeatureCotangent> feats;
          for (size_t j = 0; j < layers.size(); ++j) feats.push_back({layers[j], cots[j]});
          auto pair = moe::backward_pair(model, fr.trace, cot, feats);
          task_b = std::move(pair.first);
          pen_b = std::move(pair.second);
          penalty =
              reg::total_loss(0.0, phis, 1.0, cfg.sphere, model.config().num_experts).penalty_sum;
          break;
        }
        case reg::Variant::gradient_gram: {
          task_b = moe::backward(model, fr.trace, cot);
          Matrix psi = moe::backprop_feature_matrix(task_b, fr.trace, model, le - 2);
          penalty = reg::sphere_loss(psi);
          pen_b = moe::backward_through_backprops(model, fr.trace, cot, le - 2,
                                                  reg::sphere_loss_grad(psi));
          break;
        }
        case reg::Variant::proxy_kron: {
          task_b = moe::backward(model, fr.trace, cot);
          Matrix phi = moe::weighted_feature_matrix(fr.trace, model, le - 1);
          Matrix psi = moe::backprop_feature_matrix(task_b, fr.trace, model, le - 1);
          auto cots = reg::total_loss_cotangents({phi, psi}, cfg.sphere, model.config().num_experts);
          penalty = reg::total_loss(0.0, {phi, psi}, 1.0, cfg.sphere, model.config().num_experts)
                        .penalty_sum;
          // The Psi factor is built from the stop-gradiented task cotangent;
          // only the feature side carries parameter gradients.
          std::vector<moe::FeatureCotangent> feats = {{le - 1, cots[0]}};
          pen_b = moe::backward_extended(model, fr.trace,
                                         Matrix::Zero(x.rows(), model.config().output_dim), feats);
          break;
        }
      }
      require(std::isfinite(penalty), Err::nonfinite_loss, "train_on_task: non-finite penalty");
      Vector gt = task_b.flatten(model);
      Vector gp = pen_b.flatten(model);
      lambda = reg::adaptive_lambda(gt.norm(), gp.norm(), cfg.sphere);
      grad = gt + lambda * gp;
      gnorm = gt.norm();
    }

    double norm = grad.norm();
    require(std::isfinite(norm), Err::nonfinite_loss, "train_on_task: non-finite gradient");
    if (norm > cfg.optimizer.grad_clip && norm > 0.0)
      grad *= cfg.optimizer.grad_clip / norm;

    double frac = std::min(1.0, static_cast<double>(step) / half);
    double lr = cfg.optimizer.lr_start + frac * (cfg.optimizer.lr_end - cfg.optimizer.lr_start);
    opt.step(theta, grad, lr);
    model.unflatten(theta);

    double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    window_ms += ms;
    total_ms += ms;
    ++window_steps;

    if ((step + 1) % cfg.log_every == 0 || step + 1 == scfg.steps_per_task) {
      LogPoint lp;
      lp.task = task.index;
      lp.step = global_step_base + step + 1;
      lp.train_loss = loss;
      EvalResult ev = evaluate(model, task);
      lp.eval_loss = ev.loss;
      lp.success = ev.success;
      lp.re_k = entk::spectral_plasticity_exact(model, probe_batch);
      moe::ForwardResult pf = moe::forward(model, probe_batch);
      lp.dormant_ratio = dormant_ratio(pf.trace, model);
      lp.feature_norm = feature_norm(pf.trace, model);
      lp.grad_norm = gnorm;
      lp.penalty = penalty;
      lp.lambda = lambda;
      lp.step_time_ms = window_ms / window_steps;
      window_ms = 0.0;
      window_steps = 0;
      res.log.push_back(lp);
    }
  }
  res.mean_step_ms = total_ms / scfg.steps_per_task;
  return res;
}

MetricsRecord run_protocol(const TaskStream& stream, const ExperimentConfig& cfg, uint64_t seed) {
  MetricsRecord rec;
  rec.seed = seed;
  Matrix probe = make_probe_batch(stream, cfg);
  Rng data_rng(mix_seed(seed, 17));

  moe::MoeConfig mcfg = cfg.moe;
  mcfg.seed = mix_seed(seed, 0);
  moe::MoeModel model = moe::init_model(mcfg);
  Optimizer opt(cfg.optimizer, model.num_params());

  int global_step = 0;
  for (const Task& task : stream.tasks) {
    if (cfg.protocol == Protocol::isolated && task.index > 0) {
      mcfg.seed = mix_seed(seed, static_cast<uint64_t>(task.index));
      model = moe::init_model(mcfg);
      opt.reset();
    }
    // The sequential protocol resumes the full training state: parameters
    // and optimizer moments carry across the task boundary.

    try {
      TrainTaskResult tr =
          train_on_task(model, stream, task, cfg, opt, data_rng, probe, global_step);
      for (auto& lp : tr.log) rec.log.push_back(lp);
    } catch (const Error& e) {
      if (e.code() != Err::nonfinite_loss) throw;
      rec.aborted = true;
      rec.abort_reason = e.what();
      break;
    }
    global_step += cfg.stream.steps_per_task;

    TaskFinal fin;
    fin.task = task.index;
    EvalResult ev = evaluate(model, task);  // immediately after this segment
    fin.eval_loss = ev.loss;
    fin.success = ev.success;
    fin.re_k = entk::spectral_plasticity_exact(model, probe);
    if (cfg.moe.top_k >= 2) {
      moe::ForwardResult pf = moe::forward(model, probe);
      fin.specialization = specialization_metrics(pf.trace, model);
    }
    rec.task_finals.push_back(fin);
  }
  return rec;
}

}  // namespace sphere::continual
