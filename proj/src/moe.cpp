// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "sphere/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sphere::moe {

namespace {

double activate(Activation a, double z) {
  return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

// Derivative in terms of the pre-activation. ReLU subgradient at 0 is 0.
double activate_grad(Activation a, double z) {
  if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
  double t = std::tanh(z);
  return 1.0 - t * t;
}

Vector activate_vec(Activation a, const Vector& z) {
  return z.unaryExpr([a](double v) { return activate(a, v); });
}

Vector activate_grad_vec(Activation a, const Vector& z) {
  return z.unaryExpr([a](double v) { return activate_grad(a, v); });
}

Vector augmented(const Vector& a) {
  Vector out(a.size() + 1);
  out.head(a.size()) = a;
  out(a.size()) = 1.0;
  return out;
}

// Gate layer dims: input_dim -> gate_widths... -> E (logits linear).
std::vector<std::pair<int, int>> gate_shapes(const MoeConfig& cfg) {
  std::vector<int> dims;
  dims.push_back(cfg.input_dim);
  for (int w : cfg.gate_widths) dims.push_back(w);
  dims.push_back(cfg.num_experts);
  std::vector<std::pair<int, int>> shapes;
  for (size_t l = 1; l < dims.size(); ++l) shapes.push_back({dims[l], dims[l - 1] + 1});
  return shapes;
}

// Expert layer dims: input_dim -> expert_widths... -> output_dim.
std::vector<std::pair<int, int>> expert_shapes(const MoeConfig& cfg) {
  std::vector<int> dims;
  dims.push_back(cfg.input_dim);
  for (int w : cfg.expert_widths) dims.push_back(w);
  dims.push_back(cfg.output_dim);
  std::vector<std::pair<int, int>> shapes;
  for (size_t l = 1; l < dims.size(); ++l) shapes.push_back({dims[l], dims[l - 1] + 1});
  return shapes;
}

ParamLayout make_layout(const MoeConfig& cfg) {
  ParamLayout lay;
  int off = 0;
  for (auto [r, c] : gate_shapes(cfg)) {
    lay.gate_offsets.push_back(off);
    off += r * c;
  }
  lay.gate_size = off;
  lay.expert_offsets.resize(cfg.num_experts);
  for (int e = 0; e < cfg.num_experts; ++e)
    for (auto [r, c] : expert_shapes(cfg)) {
      lay.expert_offsets[e].push_back(off);
      off += r * c;
    }
  lay.expert_size = off - lay.gate_size;
  lay.total = off;
  return lay;
}

}  // namespace

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  fail(Err::config_error, "unknown activation: " + s);
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

void MoeConfig::validate() const {
  require(input_dim >= 1 && output_dim >= 1, Err::config_error, "MoeConfig: dims must be >= 1");
  require(num_experts >= 1, Err::config_error, "MoeConfig: num_experts must be >= 1");
  require(top_k >= 1 && top_k <= num_experts, Err::config_error, "MoeConfig: need 1 <= K <= E");
  require(temperature > 0.0, Err::config_error, "MoeConfig: temperature must be > 0");
  for (int w : expert_widths)
    require(w >= 1, Err::config_error, "MoeConfig: expert widths must be positive");
  for (int w : gate_widths)
    require(w >= 1, Err::config_error, "MoeConfig: gate widths must be positive");
}

nlohmann::json MoeConfig::to_json() const {
  return {{"input_dim", input_dim},   {"output_dim", output_dim},
          {"num_experts", num_experts}, {"top_k", top_k},
          {"expert_widths", expert_widths}, {"gate_widths", gate_widths},
          {"temperature", temperature}, {"activation", to_string(activation)},
          {"seed", seed}};
}

MoeConfig MoeConfig::from_json(const nlohmann::json& j) {
  MoeConfig cfg;
  cfg.input_dim = j.at("input_dim").get<int>();
  cfg.output_dim = j.at("output_dim").get<int>();
  cfg.num_experts = j.at("num_experts").get<int>();
  cfg.top_k = j.at("top_k").get<int>();
  cfg.expert_widths = j.at("expert_widths").get<std::vector<int>>();
  cfg.gate_widths = j.at("gate_widths").get<std::vector<int>>();
  cfg.temperature = j.at("temperature").get<double>();
  cfg.activation = activation_from_string(j.at("activation").get<std::string>());
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.validate();
  return cfg;
}

std::vector<int> ParamLayout::expert_layer_indices(const MoeConfig& cfg, int layer) const {
  auto shapes = expert_shapes(cfg);
  require(layer >= 0 && layer < static_cast<int>(shapes.size()), Err::bad_layer,
          "expert_layer_indices: layer out of range");
  std::vector<int> idx;
  int sz = shapes[layer].first * shapes[layer].second;
  for (int e = 0; e < cfg.num_experts; ++e)
    for (int i = 0; i < sz; ++i) idx.push_back(expert_offsets[e][layer] + i);
  return idx;
}

std::vector<int> ParamLayout::gate_layer_indices(const MoeConfig& cfg, int layer) const {
  auto shapes = gate_shapes(cfg);
  require(layer >= 0 && layer < static_cast<int>(shapes.size()), Err::bad_layer,
          "gate_layer_indices: layer out of range");
  std::vector<int> idx;
  int sz = shapes[layer].first * shapes[layer].second;
  for (int i = 0; i < sz; ++i) idx.push_back(gate_offsets[layer] + i);
  return idx;
}

MoeModel::MoeModel(MoeConfig cfg, std::vector<Matrix> gate_weights,
                   std::vector<std::vector<Matrix>> expert_weights)
    : cfg_(std::move(cfg)), gate_(std::move(gate_weights)), experts_(std::move(expert_weights)) {
  cfg_.validate();
  auto gs = gate_shapes(cfg_);
  require(gate_.size() == gs.size(), Err::shape_mismatch, "MoeModel: gate layer count");
  for (size_t l = 0; l < gs.size(); ++l)
    require(gate_[l].rows() == gs[l].first && gate_[l].cols() == gs[l].second,
            Err::shape_mismatch, "MoeModel: gate weight shape");
  auto es = expert_shapes(cfg_);
  require(static_cast<int>(experts_.size()) == cfg_.num_experts, Err::shape_mismatch,
          "MoeModel: expert count");
  for (const auto& ew : experts_) {
    require(ew.size() == es.size(), Err::shape_mismatch, "MoeModel: expert layer count");
    for (size_t l = 0; l < es.size(); ++l)
      require(ew[l].rows() == es[l].first && ew[l].cols() == es[l].second, Err::shape_mismatch,
              "MoeModel: expert weight shape");
  }
  layout_ = make_layout(cfg_);
}

Vector MoeModel::flatten() const {
  Vector theta(layout_.total);
  for (size_t l = 0; l < gate_.size(); ++l)
    theta.segment(layout_.gate_offsets[l], gate_[l].size()) =
        Eigen::Map<const Vector>(gate_[l].data(), gate_[l].size());
  for (int e = 0; e < cfg_.num_experts; ++e)
    for (size_t l = 0; l < experts_[e].size(); ++l)
      theta.segment(layout_.expert_offsets[e][l], experts_[e][l].size()) =
          Eigen::Map<const Vector>(experts_[e][l].data(), experts_[e][l].size());
  return theta;
}

void MoeModel::unflatten(const Vector& theta) {
  require(theta.size() == layout_.total, Err::shape_mismatch, "unflatten: wrong length");
  for (size_t l = 0; l < gate_.size(); ++l)
    Eigen::Map<Vector>(gate_[l].data(), gate_[l].size()) =
        theta.segment(layout_.gate_offsets[l], gate_[l].size());
  for (int e = 0; e < cfg_.num_experts; ++e)
    for (size_t l = 0; l < experts_[e].size(); ++l)
      Eigen::Map<Vector>(experts_[e][l].data(), experts_[e][l].size()) =
          theta.segment(layout_.expert_offsets[e][l], experts_[e][l].size());
}

nlohmann::json MoeModel::to_checkpoint() const {
  nlohmann::json j;
  j["format"] = "sphere-lab-checkpoint-v1";
  j["config"] = cfg_.to_json();
  Vector theta = flatten();
  j["params"] = std::vector<double>(theta.data(), theta.data() + theta.size());
  return j;
}

MoeModel MoeModel::from_checkpoint(const nlohmann::json& j) {
  require(j.value("format", "") == "sphere-lab-checkpoint-v1", Err::format_error,
          "checkpoint: unknown format tag");
  MoeConfig cfg = MoeConfig::from_json(j.at("config"));
  MoeModel model = init_model(cfg);
  auto params = j.at("params").get<std::vector<double>>();
  require(static_cast<int>(params.size()) == model.num_params(), Err::format_error,
          "checkpoint: parameter count mismatch");
  model.unflatten(Eigen::Map<const Vector>(params.data(), params.size()));
  return model;
}

MoeModel init_model(const MoeConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  auto draw = [&rng](int rows, int cols) {
    // cols includes the bias column; fan_in excludes it, bias starts at zero.
    int fan_in = cols - 1;
    double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix w = Matrix::Zero(rows, cols);
    for (int j = 0; j < fan_in; ++j)
      for (int i = 0; i < rows; ++i) w(i, j) = dist(rng);
    return w;
  };
  std::vector<Matrix> gate;
  for (auto [r, c] : gate_shapes(cfg)) gate.push_back(draw(r, c));
  std::vector<std::vector<Matrix>> experts(cfg.num_experts);
  for (int e = 0; e < cfg.num_experts; ++e)
    for (auto [r, c] : expert_shapes(cfg)) experts[e].push_back(draw(r, c));
  return MoeModel(cfg, std::move(gate), std::move(experts));
}

Routing topk_route(const Vector& logits, int k, double tau) {
  int e = static_cast<int>(logits.size());
  require(k >= 1 && k <= e, Err::invalid_argument, "topk_route: need 1 <= K <= E");
  require(tau > 0.0, Err::invalid_argument, "topk_route: tau must be > 0");
  Vector scaled = logits / tau;

  std::vector<int> order(e);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int i, int j) {
    if (scaled(i) != scaled(j)) return scaled(i) > scaled(j);
    return i < j;  // ties broken toward the lowest index
  });
  std::vector<int> sel(order.begin(), order.begin() + k);
  std::sort(sel.begin(), sel.end());

  double mx = -kInf;
  for (int idx : sel) mx = std::max(mx, scaled(idx));
  double denom = 0.0;
  for (int idx : sel) denom += std::exp(scaled(idx) - mx);
  Vector h = Vector::Zero(e);
  for (int idx : sel) h(idx) = std::exp(scaled(idx) - mx) / denom;
  return Routing{std::move(sel), std::move(h)};
}

ForwardResult forward(const MoeModel& model, const Matrix& batch) {
  const MoeConfig& cfg = model.config();
  require(batch.cols() == cfg.input_dim, Err::shape_mismatch, "forward: batch width != input_dim");
  int n = static_cast<int>(batch.rows());
  int lg = model.num_gate_layers();
  int le = model.num_expert_layers();

  ForwardResult res;
  res.outputs = Matrix::Zero(n, cfg.output_dim);
  res.trace.inputs = batch;
  res.trace.samples.resize(n);

  for (int i = 0; i < n; ++i) {
    SampleTrace& st = res.trace.samples[i];
    Vector a = batch.row(i).transpose();

    st.gate_inputs.resize(lg);
    st.gate_preacts.resize(lg);
    for (int l = 0; l < lg; ++l) {
      st.gate_inputs[l] = a;
      Vector z = model.gate_weights()[l] * augmented(a);
      st.gate_preacts[l] = z;
      a = (l + 1 < lg) ? activate_vec(cfg.activation, z) : z;
    }
    st.logits = a;

    Routing route = topk_route(st.logits, cfg.top_k, cfg.temperature);
    st.selected = route.selected;
    st.gating = route.gating;

    st.expert_inputs.resize(cfg.top_k);
    st.expert_preacts.resize(cfg.top_k);
    st.expert_outputs.resize(cfg.top_k);
    Vector out = Vector::Zero(cfg.output_dim);
    for (int k = 0; k < cfg.top_k; ++k) {
      int e = st.selected[k];
      Vector ae = batch.row(i).transpose();
      st.expert_inputs[k].resize(le);
      st.expert_preacts[k].resize(le);
      for (int l = 0; l < le; ++l) {
        st.expert_inputs[k][l] = ae;
        Vector z = model.expert_weights()[e][l] * augmented(ae);
        st.expert_preacts[k][l] = z;
        ae = (l + 1 < le) ? activate_vec(cfg.activation, z) : z;
      }
      st.expert_outputs[k] = ae;
      out += st.gating(e) * ae;
    }
    res.outputs.row(i) = out.transpose();
  }
  return res;
}

Vector GradBundle::flatten(const MoeModel& model) const {
  const ParamLayout& lay = model.layout();
  Vector v(lay.total);
  for (size_t l = 0; l < gate_grads.size(); ++l)
    v.segment(lay.gate_offsets[l], gate_grads[l].size()) =
        Eigen::Map<const Vector>(gate_grads[l].data(), gate_grads[l].size());
  for (size_t e = 0; e < expert_grads.size(); ++e)
    for (size_t l = 0; l < expert_grads[e].size(); ++l)
      v.segment(lay.expert_offsets[e][l], expert_grads[e][l].size()) =
          Eigen::Map<const Vector>(expert_grads[e][l].data(), expert_grads[e][l].size());
  return v;
}

namespace {

GradBundle zero_bundle(const MoeModel& model, int n, bool keep_backprops) {
  GradBundle b;
  for (const auto& w : model.gate_weights()) b.gate_grads.push_back(Matrix::Zero(w.rows(), w.cols()));
  b.expert_grads.resize(model.config().num_experts);
  for (int e = 0; e < model.config().num_experts; ++e)
    for (const auto& w : model.expert_weights()[e])
      b.expert_grads[e].push_back(Matrix::Zero(w.rows(), w.cols()));
  if (keep_backprops) {
    b.gate_backprops.resize(n);
    b.expert_backprops.resize(n);
  }
  return b;
}

struct Channel {
  const Matrix* output_cotangent = nullptr;                // N x out, may be null
  const std::vector<FeatureCotangent>* features = nullptr; // may be null
};

// Subset-softmax reverse: ds_j = (1/tau) h_j (dh_j - sum_e h_e dh_e) on the
// support, zero elsewhere. The selection is held fixed.
Vector subset_softmax_vjp(const Vector& h, const std::vector<int>& sel, double tau,
                          const Vector& dh) {
  double inner = 0.0;
  for (int e : sel) inner += h(e) * dh(e);
  Vector ds = Vector::Zero(h.size());
  for (int e : sel) ds(e) = h(e) * (dh(e) - inner) / tau;
  return ds;
}

// Shared reverse pass. Channel 0's expert backprop vectors are computed with
// the raw output cotangent (no h^(K) folding) and stored in bundles[0]; the
// routing weight is applied when accumulating parameter gradients.
void reverse_pass(const MoeModel& model, const ForwardTrace& trace,
                  const std::vector<Channel>& channels, std::vector<GradBundle>& bundles) {
  const MoeConfig& cfg = model.config();
  int n = trace.batch_size();
  int lg = model.num_gate_layers();
  int le = model.num_expert_layers();
  int nc = static_cast<int>(channels.size());

  for (const auto& ch : channels)
    if (ch.features)
      for (const auto& fc : *ch.features) {
        require(fc.layer >= 1 && fc.layer <= le - 1, Err::bad_layer,
                "feature cotangent: not a hidden expert layer");
        int width = cfg.expert_widths[fc.layer - 1];
        require(fc.cotangent.rows() == n &&
                    fc.cotangent.cols() == cfg.num_experts * width,
                Err::shape_mismatch, "feature cotangent: bad shape");
      }

  for (int i = 0; i < n; ++i) {
    const SampleTrace& st = trace.samples[i];
    // dh per channel, accumulated from the output path and feature injections.
    Matrix dh = Matrix::Zero(cfg.num_experts, nc);

    for (int k = 0; k < cfg.top_k; ++k) {
      int e = st.selected[k];
      double he = st.gating(e);

      // Cotangent on the expert output z_{le-1}, one column per channel.
      Matrix cz = Matrix::Zero(cfg.output_dim, nc);
      for (int c = 0; c < nc; ++c) {
        if (!channels[c].output_cotangent) continue;
        Vector u = channels[c].output_cotangent->row(i).transpose();
        // Channel 0 carries the un-weighted diagnostic backprops; other
        // channels run at true scale.
        cz.col(c) = (c == 0) ? u : Vector(he * u);
        dh(e, c) += u.dot(st.expert_outputs[k]);
      }

      if (nc > 0 && channels[0].output_cotangent && !bundles[0].expert_backprops.empty()) {
        bundles[0].expert_backprops[i].resize(cfg.top_k);
        bundles[0].expert_backprops[i][k].resize(le);
      }

      for (int l = le - 1; l >= 0; --l) {
        Vector atil = augmented(st.expert_inputs[k][l]);
        for (int c = 0; c < nc; ++c) {
          double scale = (c == 0) ? he : 1.0;
          if (scale == 0.0 || cz.col(c).isZero(0.0)) continue;
          bundles[c].expert_grads[e][l].noalias() += scale * cz.col(c) * atil.transpose();
        }
        if (nc > 0 && !bundles[0].expert_backprops.empty() && channels[0].output_cotangent)
          bundles[0].expert_backprops[i][k][l] = cz.col(0);
        if (l == 0) break;

        int din = static_cast<int>(st.expert_inputs[k][l].size());
        Matrix ca = model.expert_weights()[e][l].leftCols(din).transpose() * cz;
        // Feature-Gram cotangents attach to the activation a_l (the output of
        // hidden layer l): contribute h_e * c to the activation and
        // <c, a_l> to the gating weight.
        for (int c = 0; c < nc; ++c) {
          if (!channels[c].features) continue;
          for (const auto& fc : *channels[c].features) {
            if (fc.layer != l) continue;
            int width = cfg.expert_widths[l - 1];
            Vector cvec = fc.cotangent.row(i).segment(e * width, width).transpose();
            ca.col(c) += (c == 0 ? 1.0 : he) * cvec;  // channel 0 stays unscaled
            dh(e, c) += cvec.dot(st.expert_inputs[k][l]);
          }
        }
        Vector phi_grad = activate_grad_vec(cfg.activation, st.expert_preacts[k][l - 1]);
        cz = phi_grad.asDiagonal() * ca;
      }
    }

    // Gate path: subset-softmax VJP per channel, then the gate MLP.
    Matrix ds(cfg.num_experts, nc);
    bool any_gate = false;
    for (int c = 0; c < nc; ++c) {
      ds.col(c) = subset_softmax_vjp(st.gating, st.selected, cfg.temperature, dh.col(c));
      any_gate = any_gate || !ds.col(c).isZero(0.0);
    }
    if (nc > 0 && channels[0].output_cotangent && !bundles[0].gate_backprops.empty())
      bundles[0].gate_backprops[i].resize(lg);

    Matrix cz = ds;
    for (int l = lg - 1; l >= 0; --l) {
      Vector atil = augmented(st.gate_inputs[l]);
      for (int c = 0; c < nc; ++c)
        bundles[c].gate_grads[l].noalias() += cz.col(c) * atil.transpose();
      if (nc > 0 && !bundles[0].gate_backprops.empty() && channels[0].output_cotangent)
        bundles[0].gate_backprops[i][l] = cz.col(0);
      if (l == 0) break;
      int din = static_cast<int>(st.gate_inputs[l].size());
      Matrix ca = model.gate_weights()[l].leftCols(din).transpose() * cz;
      Vector phi_grad = activate_grad_vec(cfg.activation, st.gate_preacts[l - 1]);
      cz = phi_grad.asDiagonal() * ca;
    }
    (void)any_gate;
  }
}

void check_trace(const MoeModel& model, const ForwardTrace& trace, const Matrix* cot) {
  require(trace.batch_size() > 0, Err::trace_mismatch, "backward: empty trace");
  require(trace.inputs.cols() == model.config().input_dim, Err::trace_mismatch,
          "backward: trace does not match model input dim");
  const SampleTrace& st = trace.samples[0];
  require(st.logits.size() == model.config().num_experts, Err::trace_mismatch,
          "backward: trace does not match model expert count");
  require(static_cast<int>(st.gate_inputs.size()) == model.num_gate_layers(),
          Err::trace_mismatch, "backward: trace does not match gate depth");
  if (cot)
    require(cot->rows() == trace.batch_size() && cot->cols() == model.config().output_dim,
            Err::shape_mismatch, "backward: cotangent shape");
}

}  // namespace

GradBundle backward(const MoeModel& model, const ForwardTrace& trace,
                    const Matrix& output_cotangent) {
  check_trace(model, trace, &output_cotangent);
  std::vector<GradBundle> bundles;
  bundles.push_back(zero_bundle(model, trace.batch_size(), true));
  std::vector<Channel> channels = {{&output_cotangent, nullptr}};
  reverse_pass(model, trace, channels, bundles);
  return std::move(bundles[0]);
}

GradBundle backward_extended(const MoeModel& model, const ForwardTrace& trace,
                             const Matrix& output_cotangent,
                             const std::vector<FeatureCotangent>& feature_cotangents) {
  check_trace(model, trace, &output_cotangent);
  std::vector<GradBundle> bundles;
  bundles.push_back(zero_bundle(model, trace.batch_size(), true));
  bundles.push_back(zero_bundle(model, trace.batch_size(), false));
  std::vector<Channel> channels = {{&output_cotangent, nullptr}, {nullptr, &feature_cotangents}};
  reverse_pass(model, trace, channels, bundles);
  // Fold the feature-path gradients into the primary bundle.
  for (size_t l = 0; l < bundles[0].gate_grads.size(); ++l)
    bundles[0].gate_grads[l] += bundles[1].gate_grads[l];
  for (size_t e = 0; e < bundles[0].expert_grads.size(); ++e)
    for (size_t l = 0; l < bundles[0].expert_grads[e].size(); ++l)
      bundles[0].expert_grads[e][l] += bundles[1].expert_grads[e][l];
  return std::move(bundles[0]);
}

std::pair<GradBundle, GradBundle> backward_pair(const MoeModel& model, const ForwardTrace& trace,
                                                const Matrix& output_cotangent,
                                                const std::vector<FeatureCotangent>& feats) {
  check_trace(model, trace, &output_cotangent);
  std::vector<GradBundle> bundles;
  bundles.push_back(zero_bundle(model, trace.batch_size(), true));
  bundles.push_back(zero_bundle(model, trace.batch_size(), false));
  std::vector<Channel> channels = {{&output_cotangent, nullptr}, {nullptr, &feats}};
  reverse_pass(model, trace, channels, bundles);
  return {std::move(bundles[0]), std::move(bundles[1])};
}

namespace {

// Second derivative of the activation in terms of the pre-activation.
double activate_curv(Activation a, double z) {
  if (a == Activation::relu) return 0.0;
  double t = std::tanh(z);
  return -2.0 * t * (1.0 - t * t);
}

}  // namespace

GradBundle backward_through_backprops(const MoeModel& model, const ForwardTrace& trace,
                                      const Matrix& output_cotangent, int layer,
                                      const Matrix& dpsi) {
  const MoeConfig& cfg = model.config();
  int le = model.num_expert_layers();
  require(le >= 2 && layer == le - 2, Err::bad_layer,
          "backward_through_backprops: only the last hidden pre-activation is supported");
  check_trace(model, trace, &output_cotangent);
  int width = cfg.expert_widths[layer];
  int n = trace.batch_size();
  require(dpsi.rows() == n && dpsi.cols() == cfg.num_experts * width, Err::shape_mismatch,
          "backward_through_backprops: dpsi shape");

  GradBundle out = zero_bundle(model, n, false);
  for (int i = 0; i < n; ++i) {
    const SampleTrace& st = trace.samples[i];
    Vector u = output_cotangent.row(i).transpose();
    for (int k = 0; k < cfg.top_k; ++k) {
      int e = st.selected[k];
      Vector d = dpsi.row(i).segment(e * width, width).transpose();
      if (d.isZero(0.0)) continue;
      const Matrix& wout = model.expert_weights()[e][le - 1];
      Matrix wnb = wout.leftCols(width);
      const Vector& z = st.expert_preacts[k][layer];  // last hidden pre-activation
      Vector phi1 = activate_grad_vec(cfg.activation, z);

      // g = phi'(z) o (W^T u): the output-weight path and the curvature path.
      out.expert_grads[e][le - 1].leftCols(width).noalias() +=
          u * (d.cwiseProduct(phi1)).transpose();

      Vector curv = z.unaryExpr([&](double v) { return activate_curv(cfg.activation, v); });
      Vector cz = d.cwiseProduct(wnb.transpose() * u).cwiseProduct(curv);
      // Standard reverse continuation from z_{layer} downward.
      for (int l = layer; l >= 0; --l) {
        Vector atil = augmented(st.expert_inputs[k][l]);
        out.expert_grads[e][l].noalias() += cz * atil.transpose();
        if (l == 0) break;
        int din = static_cast<int>(st.expert_inputs[k][l].size());
        Vector ca = model.expert_weights()[e][l].leftCols(din).transpose() * cz;
        cz = activate_grad_vec(cfg.activation, st.expert_preacts[k][l - 1]).cwiseProduct(ca);
      }
    }
  }
  return out;
}

Matrix per_sample_jacobian(const MoeModel& model, const Matrix& batch) {
  const MoeConfig& cfg = model.config();
  int n = static_cast<int>(batch.rows());
  long p = model.num_params();
  require(n * p <= 64L * 1024 * 1024, Err::too_large, "per_sample_jacobian: N*P over memory cap");

  ForwardResult fr = forward(model, batch);
  Matrix jac(n, p);
  for (int i = 0; i < n; ++i) {
    // Single-sample trace view; cotangent = ones (scalar projection g = 1^T f).
    ForwardTrace one;
    one.inputs = batch.row(i);
    one.samples = {fr.trace.samples[i]};
    Matrix cot = Matrix::Ones(1, cfg.output_dim);
    GradBundle g = backward(model, one, cot);
    jac.row(i) = g.flatten(model).transpose();
  }
  return jac;
}

Vector jacobian_vector_product(const MoeModel& model, const ForwardTrace& trace, const Vector& w) {
  const MoeConfig& cfg = model.config();
  const ParamLayout& lay = model.layout();
  require(w.size() == lay.total, Err::shape_mismatch, "jvp: direction length != P");
  int n = trace.batch_size();
  int lg = model.num_gate_layers();
  int le = model.num_expert_layers();

  auto gate_dir = [&](int l) {
    const Matrix& shape = model.gate_weights()[l];
    return Eigen::Map<const Matrix>(w.data() + lay.gate_offsets[l], shape.rows(), shape.cols());
  };
  auto expert_dir = [&](int e, int l) {
    const Matrix& shape = model.expert_weights()[e][l];
    return Eigen::Map<const Matrix>(w.data() + lay.expert_offsets[e][l], shape.rows(),
                                    shape.cols());
  };

  Vector out(n);
  for (int i = 0; i < n; ++i) {
    const SampleTrace& st = trace.samples[i];

    // Gate tangent: inputs are constant, so ta_0 = 0.
    Vector ta = Vector::Zero(cfg.input_dim);
    Vector tz;
    for (int l = 0; l < lg; ++l) {
      Vector taug(ta.size() + 1);
      taug.head(ta.size()) = ta;
      taug(ta.size()) = 0.0;  // the constant 1 has zero tangent
      tz = gate_dir(l) * augmented(st.gate_inputs[l]) + model.gate_weights()[l] * taug;
      if (l + 1 < lg)
        ta = activate_grad_vec(cfg.activation, st.gate_preacts[l]).cwiseProduct(tz);
    }
    Vector tlogits = tz;

    // Subset-softmax forward-mode on the fixed support.
    double inner = 0.0;
    for (int e : st.selected) inner += st.gating(e) * tlogits(e);
    Vector th = Vector::Zero(cfg.num_experts);
    for (int e : st.selected)
      th(e) = st.gating(e) * (tlogits(e) - inner) / cfg.temperature;

    double tg = 0.0;
    for (int k = 0; k < cfg.top_k; ++k) {
      int e = st.selected[k];
      Vector tae = Vector::Zero(cfg.input_dim);
      Vector tze;
      for (int l = 0; l < le; ++l) {
        Vector taug(tae.size() + 1);
        taug.head(tae.size()) = tae;
        taug(tae.size()) = 0.0;
        tze = expert_dir(e, l) * augmented(st.expert_inputs[k][l]) +
              model.expert_weights()[e][l] * taug;
        if (l + 1 < le)
          tae = activate_grad_vec(cfg.activation, st.expert_preacts[k][l]).cwiseProduct(tze);
      }
      Vector tm = tze;
      tg += th(e) * st.expert_outputs[k].sum() + st.gating(e) * tm.sum();
    }
    out(i) = tg;
  }
  return out;
}

Matrix weighted_feature_matrix(const ForwardTrace& trace, const MoeModel& model, int layer,
                               bool include_bias) {
  const MoeConfig& cfg = model.config();
  int le = model.num_expert_layers();
  require(layer >= 1 && layer <= le - 1, Err::bad_layer,
          "weighted_feature_matrix: not a hidden expert layer");
  int width = cfg.expert_widths[layer - 1] + (include_bias ? 1 : 0);
  int n = trace.batch_size();
  Matrix phi = Matrix::Zero(n, cfg.num_experts * width);
  for (int i = 0; i < n; ++i) {
    const SampleTrace& st = trace.samples[i];
    for (int k = 0; k < cfg.top_k; ++k) {
      int e = st.selected[k];
      const Vector& a = st.expert_inputs[k][layer];
      phi.row(i).segment(e * width, width) =
          st.gating(e) * (include_bias ? augmented(a) : a).transpose();
    }
  }
  return phi;
}

Matrix backprop_feature_matrix(const GradBundle& bundle, const ForwardTrace& trace,
                               const MoeModel& model, int layer) {
  const MoeConfig& cfg = model.config();
  int le = model.num_expert_layers();
  require(layer >= 0 && layer <= le - 1, Err::bad_layer, "backprop_feature_matrix: bad layer");
  require(!bundle.expert_backprops.empty(), Err::trace_mismatch,
          "backprop_feature_matrix: bundle carries no backprops");
  int width = layer == le - 1 ? cfg.output_dim : cfg.expert_widths[layer];
  int n = trace.batch_size();
  Matrix psi = Matrix::Zero(n, cfg.num_experts * width);
  for (int i = 0; i < n; ++i) {
    const SampleTrace& st = trace.samples[i];
    for (int k = 0; k < cfg.top_k; ++k) {
      int e = st.selected[k];
      psi.row(i).segment(e * width, width) =
          bundle.expert_backprops[i][k][layer].transpose();
    }
  }
  return psi;
}

spectral::SpsdMatrix feature_gram(const Matrix& phi) {
  require(phi.rows() >= 1 && phi.cols() >= 1, Err::empty_input, "feature_gram: empty");
  return spectral::SpsdMatrix((phi.transpose() * phi) / static_cast<double>(phi.rows()));
}

spectral::SpsdMatrix gradient_gram(const Matrix& psi) { return feature_gram(psi); }

spectral::SpsdMatrix expert_block_gram_exact(const ForwardTrace& trace, const GradBundle& bundle,
                                             const MoeModel& model, int layer) {
  const MoeConfig& cfg = model.config();
  int le = model.num_expert_layers();
  require(layer >= 0 && layer <= le - 1, Err::bad_layer, "expert_block_gram_exact: bad layer");
  int da = (layer == 0 ? cfg.input_dim : cfg.expert_widths[layer - 1]) + 1;  // bias-absorbed
  int dg = layer == le - 1 ? cfg.output_dim : cfg.expert_widths[layer];
  int block = da * dg;
  require(block <= 512, Err::too_large, "expert_block_gram_exact: block dim over cap");
  int n = trace.batch_size();
  int dim = cfg.num_experts * block;

  // Per-sample Jacobian row slice for (e, layer) is h_e * (a_tilde (x) g):
  // accumulate the blockwise outer products directly.
  Matrix gram = Matrix::Zero(dim, dim);
  for (int i = 0; i < n; ++i) {
    const SampleTrace& st = trace.samples[i];
    std::vector<Vector> cols(cfg.top_k);
    for (int k = 0; k < cfg.top_k; ++k) {
      int e = st.selected[k];
      Vector atil = augmented(st.expert_inputs[k][layer]);
      const Vector& g = bundle.expert_backprops[i][k][layer];
      Vector j(block);  // column-major vec of g * atil^T equals atil (x) g
      for (int c = 0; c < da; ++c) j.segment(c * dg, dg) = atil(c) * g;
      cols[k] = st.gating(e) * j;
    }
    for (int k = 0; k < cfg.top_k; ++k)
      for (int k2 = 0; k2 < cfg.top_k; ++k2)
        gram.block(st.selected[k] * block, st.selected[k2] * block, block, block).noalias() +=
            cols[k] * cols[k2].transpose();
  }
  gram /= static_cast<double>(n);
  return spectral::SpsdMatrix(std::move(gram));
}

spectral::BlockPartition expert_feature_partition(const MoeModel& model, int layer) {
  const MoeConfig& cfg = model.config();
  int le = model.num_expert_layers();
  require(layer >= 1 && layer <= le - 1, Err::bad_layer, "expert_feature_partition: bad layer");
  return spectral::BlockPartition{
      std::vector<int>(cfg.num_experts, cfg.expert_widths[layer - 1])};
}

}  // namespace sphere::moe
