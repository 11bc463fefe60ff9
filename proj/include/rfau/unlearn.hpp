#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rfau/data.hpp"
#include "rfau/lora.hpp"
#include "rfau/model.hpp"

namespace rfau {

// residual: losses read the decomposed tape (Delta x_k' against its targets).
// teacher:  losses compare the adapted network's summed features against a
//           separate forward pass of the frozen original model.
enum class UnlearnMode { residual, teacher };

// Where the retained mean feature and the average label come from.
enum class TargetScope { batch, global };

std::string to_string(UnlearnMode mode);
UnlearnMode parse_unlearn_mode(const std::string& name);
std::string to_string(TargetScope scope);
TargetScope parse_target_scope(const std::string& name);

struct UnlearnConfig {
  double alpha = 1.0;   // retained feature term
  double beta = 1.0;    // unlearning feature term
  double lambda = 1.0;  // retained task term
  double mu = 1.0;      // unlearning task term
  double gamma = 0.5;   // feature vs task balance
  std::size_t rank = 4;
  double lr = 1e-2;
  std::size_t epochs = 1;
  std::size_t batch = 32;
  std::vector<std::size_t> layers;  // empty: every hidden layer
  UnlearnMode mode = UnlearnMode::residual;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double weight_decay = 0.0;
  double a_init_std = 0.01;
  double lora_scale = 1.0;
  // Decay of the running targets used when a batch has no retained rows.
  double running_decay = 0.9;
  TargetScope target_scope = TargetScope::batch;
  std::uint64_t seed = 0;

  // Every violated constraint, empty when valid.
  std::vector<std::string> violations() const;
  void validate() const;
};

// Per instrumented layer, one vector (mean feature x~_k^r).
using LayerMeans = std::vector<Vector>;

// Mean of the pretrained features over the rows selected by `retained_mask`.
LayerMeans batch_mean_features(const DecomposedTape& tape, const std::vector<bool>& retained_mask);
// Same, for a batch whose first `retained` rows are the retained ones.
LayerMeans batch_mean_features(const DecomposedTape& tape, std::size_t retained);

// Mean of one-hot retained labels (the soft target y~).
Vector average_label(const Matrix& retained_labels);

struct InterLoss {
  double retained = 0.0;  // alpha / |b_r| * sum_i sum_k ||Delta x_k'||
  double forget = 0.0;    // beta / |b_f| * sum_i sum_k ||Delta x_k' - (x~_k^r - x_k)||
  double total() const noexcept { return retained + forget; }
};

struct TaskLoss {
  double retained = 0.0;  // lambda / |b_r| * sum CE(f(x), y)
  double forget = 0.0;    // mu / |b_f| * sum CE(f(x), y~)
  double total() const noexcept { return retained + forget; }
};

// Rows [0, retained) of the tape are retained rows, the rest unlearning rows.
// An empty subset contributes 0. `grad`, when non-null, receives
// dL_inter/dx_k^s per instrumented layer.
InterLoss loss_inter(const DecomposedTape& tape, std::size_t retained, const LayerMeans& targets, double alpha,
                     double beta, std::vector<Matrix>* grad = nullptr);

// Teacher form: ||x_k^s - x_k|| on retained rows and ||x_k^s - x~_k^r|| on
// unlearning rows. `student` and `teacher` hold one matrix per instrumented layer.
InterLoss loss_inter_teacher(std::span<const Matrix> student, std::span<const Matrix> teacher,
                             const LayerMeans& targets, std::size_t retained, double alpha, double beta,
                             std::vector<Matrix>* grad = nullptr);

// Cross-entropy of softmax(logits): retained rows against `labels`, the rest against `soft_target`.
TaskLoss loss_task(const Matrix& logits, const Matrix& labels, std::size_t retained, std::span<const double> soft_target,
                   double lambda, double mu, Matrix* dlogits = nullptr);

// (gamma / m) * l_inter + (1 - gamma) * l_task.
double total_loss(double l_inter, double l_task, double gamma, std::size_t instrumented);

struct BatchLog {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double l_inter_r = 0.0;
  double l_inter_f = 0.0;
  double l_task_r = 0.0;
  double l_task_f = 0.0;
  double total = 0.0;
  bool fallback_targets = false;
};

struct BatchTargets {
  LayerMeans features;  // x~_k^r per instrumented layer
  Vector label;         // y~
};

// Objective value and adapter gradients for one batch.
struct BatchObjective {
  InterLoss inter;
  TaskLoss task;
  double total = 0.0;
  AdapterGrads grads;
  BatchTargets targets;  // the targets actually used
  bool used_fallback = false;
};

// Evaluates the full objective on `batch` in cfg.mode with one forward pass.
// With batch-scoped targets and at least one retained row, the targets come
// from this batch; otherwise `fallback` is used.
BatchObjective evaluate_objective(const InstrumentedModel& im, const BatchSplit& batch, const BatchTargets& fallback,
                                  const UnlearnConfig& cfg);

// Targets averaged over all of D_r, through the frozen model.
BatchTargets global_targets(const InstrumentedModel& im, const Dataset& retained);

// Exponential running average of batch targets; stands in for batches that
// have no retained rows. Seeded with the global D_r targets.
class RunningTargets {
 public:
  RunningTargets(BatchTargets initial, double decay) : current_(std::move(initial)), decay_(decay) {}
  void update(const BatchTargets& batch);
  const BatchTargets& current() const noexcept { return current_; }

 private:
  BatchTargets current_;
  double decay_;
};

// One pass of stratified mini-batches over D_r and D_f; one optimizer step on
// the adapters per batch.
std::vector<BatchLog> unlearn_epoch(InstrumentedModel& im, const Dataset& retained, const Dataset& forget,
                                    const UnlearnConfig& cfg, Optimizer& optimizer, RunningTargets& running,
                                    Rng& rng, std::size_t epoch);

struct UnlearnResult {
  Mlp model;                  // adapters merged into the base weights
  InstrumentedModel adapted;  // before merging
  std::vector<BatchLog> log;
  std::vector<std::string> notes;
};

// attach -> cfg.epochs x unlearn_epoch -> merge.
UnlearnResult run_unlearning(const Mlp& original, const Dataset& retained, const Dataset& forget,
                             const UnlearnConfig& cfg);

// Rank actually used on `layer`: cfg.rank capped at min(out, in) of that layer.
std::size_t effective_rank(const Mlp& base, std::size_t layer, std::size_t requested);

// {"epoch":..,"batch":..,"l_inter_r":..,"l_inter_f":..,"l_task_r":..,"l_task_f":..,"total":..}
std::string batch_log_jsonl(std::span<const BatchLog> log);

}  // namespace rfau
