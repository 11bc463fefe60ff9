#include "rfau/unlearn.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "rfau/error.hpp"

namespace rfau {

std::string to_string(UnlearnMode mode) { return mode == UnlearnMode::residual ? "residual" : "teacher"; }

UnlearnMode parse_unlearn_mode(const std::string& name) {
  if (name == "residual") return UnlearnMode::residual;
  if (name == "teacher") return UnlearnMode::teacher;
  throw ConfigError("unknown unlearning mode '" + name + "' (valid: residual, teacher)");
}

std::string to_string(TargetScope scope) { return scope == TargetScope::batch ? "batch" : "global"; }

TargetScope parse_target_scope(const std::string& name) {
  if (name == "batch") return TargetScope::batch;
  if (name == "global") return TargetScope::global;
  throw ConfigError("unknown target scope '" + name + "' (valid: batch, global)");
}

std::vector<std::string> UnlearnConfig::violations() const {
  std::vector<std::string> out;
  if (!(gamma >= 0.0 && gamma <= 1.0)) out.push_back("unlearn.gamma must be in [0, 1]");
  if (!(alpha >= 0.0)) out.push_back("unlearn.alpha must be >= 0");
  if (!(beta >= 0.0)) out.push_back("unlearn.beta must be >= 0");
  if (!(lambda >= 0.0)) out.push_back("unlearn.lambda must be >= 0");
  if (!(mu >= 0.0)) out.push_back("unlearn.mu must be >= 0");
  if (batch < 2) out.push_back("unlearn.batch must be >= 2");
  if (rank < 1) out.push_back("unlearn.rank must be >= 1");
  if (!(lr >= 0.0)) out.push_back("unlearn.lr must be >= 0");
  if (!(a_init_std >= 0.0)) out.push_back("unlearn.a_init_std must be >= 0");
  if (!(running_decay >= 0.0 && running_decay < 1.0)) out.push_back("unlearn.running_decay must be in [0, 1)");
  if (!(weight_decay >= 0.0)) out.push_back("unlearn.weight_decay must be >= 0");
  return out;
}

void UnlearnConfig::validate() const {
  auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid unlearning config:";
  for (const auto& s : v) msg += "\n  " + s;
  throw ConfigError(msg);
}

LayerMeans batch_mean_features(const DecomposedTape& tape, const std::vector<bool>& retained_mask) {
  LayerMeans out;
  for (const auto& layer : tape.layers) {
    if (retained_mask.size() != layer.pretrained.rows()) {
      throw ShapeError("batch_mean_features: mask length does not match batch rows");
    }
    Vector mean(layer.pretrained.cols(), 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < retained_mask.size(); ++i) {
      if (!retained_mask[i]) continue;
      ++count;
      auto r = layer.pretrained.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) mean[j] += r[j];
    }
    if (count == 0) throw DegenerateError("batch_mean_features: no retained rows");
    for (double& v : mean) v /= static_cast<double>(count);
    out.push_back(std::move(mean));
  }
  return out;
}

LayerMeans batch_mean_features(const DecomposedTape& tape, std::size_t retained) {
  std::vector<bool> mask(tape.student.input.rows(), false);
  std::fill_n(mask.begin(), std::min(retained, mask.size()), true);
  return batch_mean_features(tape, mask);
}

Vector average_label(const Matrix& retained_labels) {
  if (retained_labels.rows() == 0) throw DegenerateError("average_label: no retained rows");
  return mean_rows(retained_labels);
}

namespace {

// Shared body of both feature losses. For row i at layer l the aligned
// difference is `diff(l, i)`; retained rows use weight alpha/|b_r|, unlearning
// rows beta/|b_f|. The gradient w.r.t. x^s is weight * diff / ||diff||, zero at
// a zero difference.
template <typename DiffFn>
InterLoss feature_loss(std::size_t layers, std::size_t rows, std::size_t retained, double alpha, double beta,
                       std::span<const std::size_t> widths, DiffFn diff, std::vector<Matrix>* grad) {
  if (retained > rows) throw ShapeError("loss_inter: retained count exceeds batch rows");
  const std::size_t forget = rows - retained;
  const double w_r = retained > 0 ? alpha / static_cast<double>(retained) : 0.0;
  const double w_f = forget > 0 ? beta / static_cast<double>(forget) : 0.0;
  InterLoss out;
  if (grad) grad->assign(layers, Matrix());
  Vector d;
  for (std::size_t l = 0; l < layers; ++l) {
    if (grad) (*grad)[l] = Matrix(rows, widths[l]);
    for (std::size_t i = 0; i < rows; ++i) {
      diff(l, i, d);
      const double norm = l2_norm(d);
      const bool is_retained = i < retained;
      const double w = is_retained ? w_r : w_f;
      (is_retained ? out.retained : out.forget) += w * norm;
      if (grad && norm > 0.0) {
        auto g = (*grad)[l].row(i);
        for (std::size_t j = 0; j < d.size(); ++j) g[j] = w * d[j] / norm;
      }
    }
  }
  return out;
}

}  // namespace

InterLoss loss_inter(const DecomposedTape& tape, std::size_t retained, const LayerMeans& targets, double alpha,
                     double beta, std::vector<Matrix>* grad) {
  const auto& layers = tape.layers;
  if (targets.size() != layers.size()) {
    throw ShapeError("loss_inter: " + std::to_string(targets.size()) + " target vectors for " +
                     std::to_string(layers.size()) + " instrumented layers");
  }
  std::vector<std::size_t> widths;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (targets[l].size() != layers[l].residual.cols()) throw ShapeError("loss_inter: target width mismatch");
    widths.push_back(layers[l].residual.cols());
  }
  const std::size_t rows = layers.empty() ? 0 : layers.front().residual.rows();
  return feature_loss(layers.size(), rows, retained, alpha, beta, widths,
                      [&](std::size_t l, std::size_t i, Vector& d) {
                        auto res = layers[l].residual.row(i);
                        d.assign(res.begin(), res.end());
                        if (i < retained) return;  // target 0
                        // Delta x' - (x~ - x)
                        auto pre = layers[l].pretrained.row(i);
                        for (std::size_t j = 0; j < d.size(); ++j) d[j] -= targets[l][j] - pre[j];
                      },
                      grad);
}

InterLoss loss_inter_teacher(std::span<const Matrix> student, std::span<const Matrix> teacher,
                             const LayerMeans& targets, std::size_t retained, double alpha, double beta,
                             std::vector<Matrix>* grad) {
  if (student.size() != teacher.size() || student.size() != targets.size()) {
    throw ShapeError("loss_inter_teacher: layer count mismatch between student, teacher and targets");
  }
  std::vector<std::size_t> widths;
  for (std::size_t l = 0; l < student.size(); ++l) {
    if (!student[l].same_shape(teacher[l]) || targets[l].size() != student[l].cols()) {
      throw ShapeError("loss_inter_teacher: feature shape mismatch at instrumented layer " + std::to_string(l));
    }
    widths.push_back(student[l].cols());
  }
  const std::size_t rows = student.empty() ? 0 : student.front().rows();
  return feature_loss(student.size(), rows, retained, alpha, beta, widths,
                      [&](std::size_t l, std::size_t i, Vector& d) {
                        auto s = student[l].row(i);
                        d.assign(s.begin(), s.end());
                        if (i < retained) {
                          auto t = teacher[l].row(i);
                          for (std::size_t j = 0; j < d.size(); ++j) d[j] -= t[j];
                        } else {
                          for (std::size_t j = 0; j < d.size(); ++j) d[j] -= targets[l][j];
                        }
                      },
                      grad);
}

TaskLoss loss_task(const Matrix& logits, const Matrix& labels, std::size_t retained, std::span<const double> soft_target,
                   double lambda, double mu, Matrix* dlogits) {
  if (!logits.same_shape(labels)) throw ShapeError("loss_task: logits and labels differ in shape");
  if (retained > logits.rows()) throw ShapeError("loss_task: retained count exceeds batch rows");
  const std::size_t rows = logits.rows();
  const std::size_t forget = rows - retained;
  if (forget > 0 && soft_target.size() != logits.cols()) throw ShapeError("loss_task: soft target width mismatch");

  Matrix targets = labels;
  for (std::size_t i = retained; i < rows; ++i) std::ranges::copy(soft_target, targets.row(i).begin());

  Vector w_r(rows, 0.0), w_f(rows, 0.0);
  for (std::size_t i = 0; i < retained; ++i) w_r[i] = lambda / static_cast<double>(retained);
  for (std::size_t i = retained; i < rows; ++i) w_f[i] = mu / static_cast<double>(forget);

  TaskLoss out;
  Matrix d_r, d_f;
  out.retained = weighted_softmax_xent(logits, targets, w_r, d_r);
  out.forget = weighted_softmax_xent(logits, targets, w_f, d_f);
  if (dlogits) *dlogits = d_r + d_f;
  return out;
}

double total_loss(double l_inter, double l_task, double gamma, std::size_t instrumented) {
  if (instrumented == 0) throw ConfigError("total_loss: no instrumented layers");
  return gamma / static_cast<double>(instrumented) * l_inter + (1.0 - gamma) * l_task;
}

namespace {

// Frozen-model features per instrumented layer, in the chosen mode's own route:
// the decomposed tape in residual mode, a separate teacher forward otherwise.
std::vector<Matrix> teacher_features(const InstrumentedModel& im, const Matrix& x) {
  ForwardResult teacher = forward(im.base(), x);
  std::vector<Matrix> out;
  for (std::size_t k : im.instrumented_layers()) out.push_back(std::move(teacher.tape.pre[k]));
  return out;
}

LayerMeans mean_of_rows(std::span<const Matrix> features, std::size_t retained) {
  LayerMeans out;
  for (const auto& f : features) {
    Vector mean(f.cols(), 0.0);
    for (std::size_t i = 0; i < retained; ++i) {
      auto r = f.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) mean[j] += r[j];
    }
    for (double& v : mean) v /= static_cast<double>(retained);
    out.push_back(std::move(mean));
  }
  return out;
}

Matrix retained_labels(const BatchSplit& batch) {
  Matrix y(batch.retained, batch.y.cols());
  for (std::size_t i = 0; i < batch.retained; ++i) std::ranges::copy(batch.y.row(i), y.row(i).begin());
  return y;
}

}  // namespace

BatchTargets global_targets(const InstrumentedModel& im, const Dataset& retained) {
  if (retained.empty()) throw DegenerateError("global_targets: D_r is empty");
  return {mean_of_rows(teacher_features(im, retained.x), retained.size()), average_label(retained.y)};
}

void RunningTargets::update(const BatchTargets& batch) {
  auto blend = [&](Vector& cur, const Vector& next) {
    for (std::size_t j = 0; j < cur.size(); ++j) cur[j] = decay_ * cur[j] + (1.0 - decay_) * next[j];
  };
  for (std::size_t l = 0; l < current_.features.size(); ++l) blend(current_.features[l], batch.features[l]);
  blend(current_.label, batch.label);
}

BatchObjective evaluate_objective(const InstrumentedModel& im, const BatchSplit& batch, const BatchTargets& fallback,
                                  const UnlearnConfig& cfg) {
  const std::size_t m = im.instrumented_count();
  const bool own_targets = cfg.target_scope == TargetScope::batch && batch.retained > 0;
  BatchObjective out;
  out.used_fallback = !own_targets;
  std::vector<Matrix> feature_grad;
  Matrix dlogits;
  Matrix logits;
  FeatureTape student;
  std::vector<Matrix> projected;

  if (cfg.mode == UnlearnMode::residual) {
    DecomposedForward fwd = forward_decomposed(im, batch.x);
    out.targets.features = own_targets ? batch_mean_features(fwd.tape, batch.retained) : fallback.features;
    out.inter = loss_inter(fwd.tape, batch.retained, out.targets.features, cfg.alpha, cfg.beta, &feature_grad);
    logits = std::move(fwd.logits);
    student = std::move(fwd.tape.student);
    projected = std::move(fwd.tape.projected);
  } else {
    ForwardResult fwd = forward_adapted(im, batch.x, &projected);
    std::vector<Matrix> student_features;
    for (std::size_t k : im.instrumented_layers()) student_features.push_back(fwd.tape.pre[k]);
    const std::vector<Matrix> teacher = teacher_features(im, batch.x);
    out.targets.features = own_targets ? mean_of_rows(teacher, batch.retained) : fallback.features;
    out.inter = loss_inter_teacher(student_features, teacher, out.targets.features, batch.retained, cfg.alpha,
                                   cfg.beta, &feature_grad);
    logits = std::move(fwd.logits);
    student = std::move(fwd.tape);
  }
  out.targets.label = own_targets ? average_label(retained_labels(batch)) : fallback.label;
  out.task = loss_task(logits, batch.y, batch.retained, out.targets.label, cfg.lambda, cfg.mu, &dlogits);
  out.total = total_loss(out.inter.total(), out.task.total(), cfg.gamma, m);
  if (!std::isfinite(out.total)) throw NumericError("unlearning objective is not finite");

  const double inter_scale = cfg.gamma / static_cast<double>(m);
  for (auto& g : feature_grad) g = inter_scale * g;
  dlogits = (1.0 - cfg.gamma) * dlogits;
  out.grads = backward_adapters(im, student, projected, dlogits, feature_grad);
  return out;
}

std::vector<BatchLog> unlearn_epoch(InstrumentedModel& im, const Dataset& retained, const Dataset& forget,
                                    const UnlearnConfig& cfg, Optimizer& optimizer, RunningTargets& running,
                                    Rng& rng, std::size_t epoch) {
  const std::size_t n = retained.size() + forget.size();
  const std::vector<BatchSplit> batches = stratified_batches(retained, forget, std::min(cfg.batch, n), rng);
  std::vector<BatchLog> log;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    BatchObjective obj = evaluate_objective(im, batches[b], running.current(), cfg);
    optimizer.step(adapter_slots(im, obj.grads));
    if (!obj.used_fallback) running.update(obj.targets);
    BatchLog entry{epoch, b};
    entry.l_inter_r = obj.inter.retained;
    entry.l_inter_f = obj.inter.forget;
    entry.l_task_r = obj.task.retained;
    entry.l_task_f = obj.task.forget;
    entry.total = obj.total;
    entry.fallback_targets = obj.used_fallback && cfg.target_scope == TargetScope::batch;
    log.push_back(entry);
  }
  return log;
}

std::size_t effective_rank(const Mlp& base, std::size_t layer, std::size_t requested) {
  const auto& host = base.layer(layer);
  return std::min({requested, host.out_dim(), host.in_dim()});
}

UnlearnResult run_unlearning(const Mlp& original, const Dataset& retained, const Dataset& forget,
                             const UnlearnConfig& cfg) {
  cfg.validate();
  if (retained.empty()) throw EmptyInputError("run_unlearning: D_r is empty");

  std::vector<std::size_t> layers = cfg.layers.empty() ? default_instrumented_layers(original) : cfg.layers;
  std::ranges::sort(layers);
  Rng rng(cfg.seed);
  std::vector<std::string> notes;
  notes.push_back("parameter update is gradient descent: theta <- theta - lr * grad(L)");

  // Adapters are attached one layer at a time so each can use its own capped rank.
  std::vector<LoraAdapter> adapters;
  for (std::size_t k : layers) {
    if (k >= original.num_layers()) {
      throw ConfigError("run_unlearning: layer " + std::to_string(k) + " out of range");
    }
    const std::size_t rank = effective_rank(original, k, cfg.rank);
    if (rank != cfg.rank) {
      notes.push_back("layer " + std::to_string(k) + ": rank capped at " + std::to_string(rank));
    }
    const std::size_t one[] = {k};
    InstrumentedModel single =
        attach(original, one, AttachOptions{rank, cfg.a_init_std, cfg.lora_scale}, rng);
    adapters.push_back(single.adapters().front());
  }
  InstrumentedModel im(original, std::move(adapters), cfg.lora_scale);

  RunningTargets running(global_targets(im, retained), cfg.running_decay);
  Optimizer optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay);
  std::vector<BatchLog> log;
  std::size_t fallbacks = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    auto epoch_log = unlearn_epoch(im, retained, forget, cfg, optimizer, running, rng, e + 1);
    for (const auto& entry : epoch_log) fallbacks += entry.fallback_targets ? 1 : 0;
    log.insert(log.end(), epoch_log.begin(), epoch_log.end());
  }
  if (fallbacks > 0) {
    notes.push_back(std::to_string(fallbacks) + " batch(es) had no retained rows; running-average targets used");
  }
  Mlp merged = merge(im);
  return UnlearnResult{std::move(merged), std::move(im), std::move(log), std::move(notes)};
}

std::string batch_log_jsonl(std::span<const BatchLog> log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["batch"] = e.batch;
    j["l_inter_r"] = e.l_inter_r;
    j["l_inter_f"] = e.l_inter_f;
    j["l_task_r"] = e.l_task_r;
    j["l_task_f"] = e.l_task_f;
    j["total"] = e.total;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace rfau
