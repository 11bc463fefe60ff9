#include "rfau/baselines.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "rfau/error.hpp"

namespace rfau {

std::string to_string(BaselineMethod method) {
  switch (method) {
    case BaselineMethod::retrain: return "retrain";
    case BaselineMethod::finetune: return "finetune";
    case BaselineMethod::neggrad: return "neggrad";
    case BaselineMethod::badt: return "badt";
  }
  return "unknown";
}

std::vector<std::string> baseline_names() { return {"retrain", "finetune", "neggrad", "badt"}; }

BaselineMethod parse_baseline(const std::string& name) {
  for (auto m : {BaselineMethod::retrain, BaselineMethod::finetune, BaselineMethod::neggrad, BaselineMethod::badt}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown baseline '" + name + "' (valid: retrain, finetune, neggrad, badt)");
}

std::vector<std::string> BaselineSpec::violations() const {
  std::vector<std::string> out;
  if (batch < 1) out.push_back("baseline.batch must be >= 1");
  if (!(lr >= 0.0)) out.push_back("baseline.lr must be >= 0");
  if (!(weight_decay >= 0.0)) out.push_back("baseline.weight_decay must be >= 0");
  if (method == BaselineMethod::badt && !(temperature > 0.0)) out.push_back("baseline.temperature must be > 0");
  if (method == BaselineMethod::neggrad && !(clip_norm > 0.0)) out.push_back("baseline.clip_norm must be > 0");
  return out;
}

void BaselineSpec::validate() const {
  auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid " + to_string(method) + " baseline config:";
  for (const auto& s : v) msg += "\n  " + s;
  throw ConfigError(msg);
}

namespace {

TrainOptions train_options(const BaselineSpec& spec) {
  return {spec.epochs, spec.batch, spec.lr, spec.optimizer, spec.weight_decay};
}

std::vector<BaselineLog> to_baseline_log(const std::vector<EpochLog>& log) {
  std::vector<BaselineLog> out;
  for (const auto& e : log) out.push_back({e.epoch, e.mean_loss});
  return out;
}

Matrix scaled(const Matrix& m, double factor) { return factor * m; }

}  // namespace

BaselineResult retrain(const Dataset& retained, std::span<const std::size_t> widths, const BaselineSpec& spec) {
  spec.validate();
  if (retained.empty()) throw EmptyInputError("retrain: D_r is empty");
  Rng rng(spec.seed);
  Mlp model = mlp_init(widths, rng);
  auto log = train_supervised(model, retained, train_options(spec), rng);
  return {std::move(model), to_baseline_log(log)};
}

BaselineResult finetune(const Mlp& original, const Dataset& retained, const BaselineSpec& spec) {
  spec.validate();
  if (retained.empty()) throw EmptyInputError("finetune: D_r is empty");
  Mlp model = original;
  Rng rng(spec.seed);
  auto log = train_supervised(model, retained, train_options(spec), rng);
  return {std::move(model), to_baseline_log(log)};
}

BaselineResult neggrad(const Mlp& original, const Dataset& forget, const BaselineSpec& spec) {
  spec.validate();
  if (forget.empty()) throw EmptyInputError("neggrad: D_f is empty");
  Mlp model = original;
  Rng rng(spec.seed);
  Optimizer opt(spec.optimizer, spec.lr, spec.weight_decay);
  std::vector<std::size_t> order(forget.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  BaselineResult out;
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch) {
      const std::size_t end = std::min(order.size(), start + spec.batch);
      const Dataset batch = forget.subset(std::span(order).subspan(start, end - start));
      ForwardResult fr = forward(model, batch.x);
      const Vector weights(batch.size(), 1.0 / static_cast<double>(batch.size()));
      Matrix dlogits;
      const double ce = weighted_softmax_xent(fr.logits, batch.y, weights, dlogits);
      loss_sum += -ce * static_cast<double>(batch.size());
      MlpGrads grads = backward(model, fr.tape, dlogits);
      scale_grads(grads, -1.0);
      auto slots = param_slots(model, grads);
      const double norm = global_grad_norm(slots);
      if (!std::isfinite(norm)) throw NumericError("neggrad: non-finite gradient");
      if (norm > spec.clip_norm) scale_grads(grads, spec.clip_norm / norm);
      opt.step(param_slots(model, grads));
    }
    out.log.push_back({epoch + 1, loss_sum / static_cast<double>(order.size())});
  }
  out.model = std::move(model);
  return out;
}

Mlp incompetent_teacher(const Mlp& original, const BaselineSpec& spec) {
  Rng rng(derive_seed(spec.seed, 0xbad7));
  const auto widths = original.widths();
  return mlp_init(widths, rng);
}

double mean_kl(const Matrix& teacher_logits, const Matrix& student_logits, double temperature) {
  if (!teacher_logits.same_shape(student_logits)) throw ShapeError("mean_kl: shape mismatch");
  if (teacher_logits.rows() == 0) throw EmptyInputError("mean_kl: no rows");
  const Matrix t = softmax_rows(scaled(teacher_logits, 1.0 / temperature));
  const Matrix s = softmax_rows(scaled(student_logits, 1.0 / temperature));
  double total = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const double p = t(i, c);
      if (p > 0.0) total += p * (std::log(p + kProbClip) - std::log(s(i, c) + kProbClip));
    }
  }
  return total / static_cast<double>(t.rows());
}

BaselineResult bad_teacher(const Mlp& original, const Dataset& retained, const Dataset& forget,
                           const BaselineSpec& spec) {
  spec.validate();
  if (retained.empty()) throw EmptyInputError("bad_teacher: D_r is empty");
  if (forget.empty()) throw EmptyInputError("bad_teacher: D_f is empty");
  const Mlp& competent = original;
  const Mlp incompetent = incompetent_teacher(original, spec);
  Mlp student = original;
  Rng rng(spec.seed);
  Optimizer opt(spec.optimizer, spec.lr, spec.weight_decay);
  const double inv_t = 1.0 / spec.temperature;
  const std::size_t n = retained.size() + forget.size();

  BaselineResult out;
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    const auto batches = stratified_batches(retained, forget, std::max<std::size_t>(2, std::min(spec.batch, n)), rng);
    double loss_sum = 0.0;
    for (const auto& batch : batches) {
      const Matrix good = predict_logits(competent, batch.x);
      const Matrix bad = predict_logits(incompetent, batch.x);
      Matrix teacher_logits(batch.size(), good.cols());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const Matrix& src = i < batch.retained ? good : bad;
        std::ranges::copy(src.row(i), teacher_logits.row(i).begin());
      }
      const Matrix teacher_probs = softmax_rows(scaled(teacher_logits, inv_t));
      ForwardResult fr = forward(student, batch.x);
      const Vector weights(batch.size(), 1.0 / static_cast<double>(batch.size()));
      Matrix dscaled;
      // KL = CE(teacher, student) - H(teacher); H does not depend on the student.
      weighted_softmax_xent(scaled(fr.logits, inv_t), teacher_probs, weights, dscaled);
      loss_sum += mean_kl(teacher_logits, fr.logits, spec.temperature) * static_cast<double>(batch.size());
      MlpGrads grads = backward(student, fr.tape, scaled(dscaled, inv_t));
      opt.step(param_slots(student, grads));
    }
    out.log.push_back({epoch + 1, loss_sum / static_cast<double>(n)});
  }
  out.model = std::move(student);
  return out;
}

BaselineResult run_baseline(const Mlp& original, const Dataset& retained, const Dataset& forget,
                            const BaselineSpec& spec) {
  switch (spec.method) {
    case BaselineMethod::retrain: {
      const auto widths = original.widths();
      return retrain(retained, widths, spec);
    }
    case BaselineMethod::finetune: return finetune(original, retained, spec);
    case BaselineMethod::neggrad: return neggrad(original, forget, spec);
    case BaselineMethod::badt: return bad_teacher(original, retained, forget, spec);
  }
  throw ConfigError("unknown baseline");
}

std::string baseline_log_jsonl(std::span<const BaselineLog> log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["loss"] = e.mean_loss;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace rfau
