#include "rfau/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rfau/error.hpp"

namespace rfau {

Mlp::Mlp(std::vector<LinearLayer> layers) : layers_(std::move(layers)) {
  if (layers_.size() < 2) throw ConfigError("Mlp: need at least one hidden layer and a head");
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& l = layers_[k];
    if (l.bias.size() != l.out_dim()) {
      throw ShapeError("Mlp: layer " + std::to_string(k) + " bias length does not match weight rows");
    }
    if (k > 0 && layers_[k - 1].out_dim() != l.in_dim()) {
      throw ShapeError("Mlp: layer " + std::to_string(k) + " input width " + std::to_string(l.in_dim()) +
                       " does not chain with previous output " + std::to_string(layers_[k - 1].out_dim()));
    }
  }
}

std::vector<std::size_t> Mlp::widths() const {
  std::vector<std::size_t> w{input_width()};
  for (const auto& l : layers_) w.push_back(l.out_dim());
  return w;
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

Mlp mlp_init(std::span<const std::size_t> widths, Rng& rng) {
  if (widths.size() < 3) throw ConfigError("mlp_init: widths need input, >= 1 hidden, output");
  for (std::size_t w : widths) {
    if (w == 0) throw ConfigError("mlp_init: zero width");
  }
  std::vector<LinearLayer> layers;
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    const double std = std::sqrt(2.0 / static_cast<double>(widths[k]));
    layers.push_back({gaussian_fill(rng, widths[k + 1], widths[k], 0.0, std), Vector(widths[k + 1], 0.0)});
  }
  return Mlp(std::move(layers));
}

namespace {

Matrix relu(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

}  // namespace

ForwardResult forward(const Mlp& m, const Matrix& x) {
  if (x.cols() != m.input_width()) {
    throw ShapeError("forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                     std::to_string(m.input_width()));
  }
  ForwardResult out;
  out.tape.input = x;
  const std::size_t n = m.num_layers();
  for (std::size_t k = 0; k < n; ++k) {
    const auto& layer = m.layer(k);
    Matrix z = matmul_nt(out.tape.layer_input(k), layer.weight);
    add_row_vector(z, layer.bias);
    if (k + 1 < n) out.tape.post.push_back(relu(z));
    out.tape.pre.push_back(std::move(z));
  }
  out.logits = out.tape.pre.back();
  return out;
}

Matrix predict_logits(const Mlp& m, const Matrix& x) { return forward(m, x).logits; }

Matrix predict_proba(const Mlp& m, const Matrix& x) { return softmax_rows(predict_logits(m, x)); }

std::vector<Matrix> backpropagate(const std::vector<const Matrix*>& weights, const FeatureTape& tape,
                                  const Matrix& dlogits, std::span<const Matrix> feature_grads,
                                  const LayerVisitor& on_layer) {
  const std::size_t n = weights.size();
  if (tape.pre.size() != n) throw ShapeError("backpropagate: tape does not match the model");
  if (!dlogits.same_shape(tape.pre.back())) {
    throw ShapeError("backpropagate: dlogits shape does not match logits");
  }
  std::vector<Matrix> deltas(n);
  Matrix delta = dlogits;
  for (std::size_t k = n; k-- > 0;) {
    if (k < feature_grads.size() && !feature_grads[k].empty()) delta += feature_grads[k];
    deltas[k] = delta;
    on_layer(k, delta, tape.layer_input(k));
    if (k == 0) break;
    Matrix upstream = matmul(delta, *weights[k]);
    const Matrix& pre = tape.pre[k - 1];
    auto up = upstream.values();
    auto pv = pre.values();
    for (std::size_t i = 0; i < up.size(); ++i) {
      if (!(pv[i] > 0.0)) up[i] = 0.0;
    }
    delta = std::move(upstream);
  }
  return deltas;
}

MlpGrads backward(const Mlp& m, const FeatureTape& tape, const Matrix& dlogits) {
  std::vector<const Matrix*> weights;
  for (const auto& l : m.layers()) weights.push_back(&l.weight);
  MlpGrads grads(m.num_layers());
  backpropagate(weights, tape, dlogits, {}, [&](std::size_t k, const Matrix& delta, const Matrix& input) {
    grads[k].weight = matmul_tn(delta, input);
    grads[k].bias = column_sums(delta);
  });
  return grads;
}

std::vector<ParamSlot> param_slots(Mlp& m, const MlpGrads& grads) {
  if (grads.size() != m.num_layers()) throw ShapeError("param_slots: gradient count does not match layers");
  std::vector<ParamSlot> slots;
  for (std::size_t k = 0; k < m.num_layers(); ++k) {
    auto& l = m.layer(k);
    if (!grads[k].weight.same_shape(l.weight) || grads[k].bias.size() != l.bias.size()) {
      throw ShapeError("param_slots: gradient shape mismatch at layer " + std::to_string(k));
    }
    slots.push_back({l.weight.values(), grads[k].weight.values()});
    slots.push_back({l.bias, grads[k].bias});
  }
  return slots;
}

double global_grad_norm(std::span<const ParamSlot> slots) {
  double acc = 0.0;
  for (const auto& s : slots)
    for (double g : s.grad) acc += g * g;
  return std::sqrt(acc);
}

void scale_grads(MlpGrads& grads, double factor) {
  for (auto& g : grads) {
    for (double& v : g.weight.values()) v *= factor;
    for (double& v : g.bias) v *= factor;
  }
}

namespace {

void require_finite_grads(std::span<const ParamSlot> slots) {
  for (const auto& s : slots) {
    if (s.value.size() != s.grad.size()) throw ShapeError("optimizer: gradient size mismatch");
    if (!all_finite(s.grad)) throw NumericError("optimizer: non-finite gradient, step aborted");
  }
}

}  // namespace

void sgd_update(std::span<const ParamSlot> slots, double lr) {
  require_finite_grads(slots);
  for (const auto& s : slots)
    for (std::size_t i = 0; i < s.value.size(); ++i) s.value[i] -= lr * s.grad[i];
}

void sgd_step(Mlp& m, const MlpGrads& grads, double lr) { sgd_update(param_slots(m, grads), lr); }

void AdamW::step(std::span<const ParamSlot> slots) {
  require_finite_grads(slots);
  if (t_ == 0) {
    m_.clear();
    v_.clear();
    for (const auto& s : slots) {
      m_.emplace_back(s.value.size(), 0.0);
      v_.emplace_back(s.value.size(), 0.0);
    }
  }
  if (m_.size() != slots.size()) throw ShapeError("AdamW: parameter count changed between steps");
  for (std::size_t j = 0; j < slots.size(); ++j) {
    if (m_[j].size() != slots[j].value.size()) throw ShapeError("AdamW: parameter shape changed between steps");
  }
  ++t_;
  const auto& o = options_;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(t_));
  for (std::size_t j = 0; j < slots.size(); ++j) {
    auto value = slots[j].value;
    auto grad = slots[j].grad;
    auto& m = m_[j];
    auto& v = v_[j];
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * grad[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      value[i] -= o.lr * o.weight_decay * value[i];
      value[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
}

void adamw_step(Mlp& m, const MlpGrads& grads, AdamW& state) { state.step(param_slots(m, grads)); }

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adamw"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + name + "' (valid: sgd, adamw)");
}

Optimizer::Optimizer(OptimizerKind kind, double lr, double weight_decay)
    : kind_(kind), lr_(lr), adamw_(AdamWOptions{.lr = lr, .weight_decay = weight_decay}) {}

void Optimizer::step(std::span<const ParamSlot> slots) {
  if (kind_ == OptimizerKind::sgd) {
    sgd_update(slots, lr_);
  } else {
    adamw_.step(slots);
  }
}

double weighted_softmax_xent(const Matrix& logits, const Matrix& targets, std::span<const double> row_weights,
                             Matrix& dlogits) {
  if (!logits.same_shape(targets) || row_weights.size() != logits.rows()) {
    throw ShapeError("weighted_softmax_xent: shape mismatch");
  }
  const Matrix probs = softmax_rows(logits);
  dlogits = Matrix(logits.rows(), logits.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const double w = row_weights[i];
    if (w == 0.0) continue;
    auto p = probs.row(i);
    auto t = targets.row(i);
    auto d = dlogits.row(i);
    // d/dz_j of -sum_c t_c ln(p_c + eps) = -s_j + p_j * sum_c s_c, s_c = t_c p_c / (p_c + eps).
    double s_total = 0.0;
    double row_loss = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c) {
      if (t[c] == 0.0) continue;
      row_loss -= t[c] * std::log(p[c] + kProbClip);
      const double s = t[c] * p[c] / (p[c] + kProbClip);
      d[c] -= s;
      s_total += s;
    }
    for (std::size_t c = 0; c < p.size(); ++c) d[c] = w * (d[c] + p[c] * s_total);
    loss += w * row_loss;
  }
  return loss;
}

std::vector<EpochLog> train_supervised(Mlp& m, const Dataset& data, const TrainOptions& options, Rng& rng) {
  if (data.empty()) throw EmptyInputError("train_supervised: empty dataset");
  if (options.batch == 0) throw ConfigError("train_supervised: batch must be >= 1");
  std::vector<EpochLog> log;
  Optimizer opt(options.optimizer, options.lr, options.weight_decay);
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += options.batch) {
      const std::size_t end = std::min(n, start + options.batch);
      const Dataset batch = data.subset(std::span(order).subspan(start, end - start));
      ForwardResult fr = forward(m, batch.x);
      const Vector weights(batch.size(), 1.0 / static_cast<double>(batch.size()));
      Matrix dlogits;
      const double loss = weighted_softmax_xent(fr.logits, batch.y, weights, dlogits);
      if (!std::isfinite(loss)) {
        throw NumericError("train_supervised: loss diverged at epoch " + std::to_string(epoch));
      }
      loss_sum += loss * static_cast<double>(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        if (argmax(fr.logits.row(i)) == batch.label(i)) ++correct;
      }
      MlpGrads grads = backward(m, fr.tape, dlogits);
      opt.step(param_slots(m, grads));
    }
    log.push_back({epoch + 1, loss_sum / static_cast<double>(n),
                   static_cast<double>(correct) / static_cast<double>(n)});
  }
  return log;
}

}  // namespace rfau
