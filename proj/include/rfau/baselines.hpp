#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rfau/data.hpp"
#include "rfau/model.hpp"

namespace rfau {

enum class BaselineMethod { retrain, finetune, neggrad, badt };

std::string to_string(BaselineMethod method);
// Throws ConfigError listing the valid names.
BaselineMethod parse_baseline(const std::string& name);
std::vector<std::string> baseline_names();

struct BaselineSpec {
  BaselineMethod method = BaselineMethod::finetune;
  std::size_t epochs = 1;
  double lr = 1e-2;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double weight_decay = 0.0;
  double temperature = 1.0;  // badt
  double clip_norm = 5.0;    // neggrad, global gradient norm

  std::vector<std::string> violations() const;
  void validate() const;
};

struct BaselineLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
};

struct BaselineResult {
  Mlp model;
  std::vector<BaselineLog> log;
};

// Fresh model (seeded by spec.seed) trained on D_r only.
BaselineResult retrain(const Dataset& retained, std::span<const std::size_t> widths, const BaselineSpec& spec);

// Continues cross-entropy training of `original` on D_r.
BaselineResult finetune(const Mlp& original, const Dataset& retained, const BaselineSpec& spec);

// Gradient ascent on the D_f cross-entropy, with the global gradient norm
// clipped to spec.clip_norm before each step.
BaselineResult neggrad(const Mlp& original, const Dataset& forget, const BaselineSpec& spec);

// Distills `original` into a student (initialized from `original`): the
// teacher is `original` itself on D_r rows and a freshly initialized network
// on D_f rows. Loss is KL(teacher || student) at spec.temperature.
BaselineResult bad_teacher(const Mlp& original, const Dataset& retained, const Dataset& forget,
                           const BaselineSpec& spec);

// The randomly initialized incompetent teacher bad_teacher uses for `spec`.
Mlp incompetent_teacher(const Mlp& original, const BaselineSpec& spec);

// Mean KL(softmax(teacher / T) || softmax(student / T)) over rows.
double mean_kl(const Matrix& teacher_logits, const Matrix& student_logits, double temperature = 1.0);

// Dispatches on spec.method.
BaselineResult run_baseline(const Mlp& original, const Dataset& retained, const Dataset& forget,
                            const BaselineSpec& spec);

std::string baseline_log_jsonl(std::span<const BaselineLog> log);

}  // namespace rfau
