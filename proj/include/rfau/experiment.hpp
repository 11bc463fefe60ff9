#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rfau/baselines.hpp"
#include "rfau/data.hpp"
#include "rfau/eval.hpp"
#include "rfau/model.hpp"
#include "rfau/unlearn.hpp"

namespace rfau {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | csv | idx
  ClusterSpec synthetic;
  std::string train_csv;
  std::string test_csv;
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  std::size_t subsample = 0;  // idx only, 0 keeps every row
  std::size_t idx_classes = 10;
};

struct BaselineDefaults {
  std::vector<std::string> methods = {"retrain", "finetune", "neggrad", "badt"};
  std::size_t epochs = 1;  // retrain uses train.epochs instead
  double lr = 1e-2;
  std::size_t batch = 32;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double weight_decay = 0.0;
  double temperature = 1.0;
  double clip_norm = 5.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out = "runs";
  DataConfig data;
  std::vector<std::size_t> hidden = {16, 16};
  TrainOptions train;
  SplitSpec split;
  UnlearnConfig unlearn;
  BaselineDefaults baseline;
  EvalOptions eval;
  std::vector<double> gammas = {0.1, 0.3, 0.5, 0.7, 0.9};
};

ExperimentConfig default_config();
nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);

// Strict: unknown keys, wrong types and out-of-range values are all
// collected and reported together in one ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& doc);
std::vector<std::string> config_violations(const ExperimentConfig& cfg);

// sha256 of the canonical config JSON, without the output directory.
std::string config_hash(const ExperimentConfig& cfg);

// Leaf paths of the schema ("unlearn.gamma") and their flag spelling ("--unlearn-gamma").
std::vector<std::string> config_paths();
std::string flag_for_path(const std::string& path);

// default < config file < flag overrides (path -> raw flag text).
ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const std::map<std::string, std::string>& overrides);

// Seeds for the independent random streams of one experiment.
enum class SeedStream : std::uint64_t { data = 1, init = 2, split = 3, unlearn = 4, baseline = 5, attack = 6, retrain_init = 7 };
std::uint64_t stream_seed(const ExperimentConfig& cfg, SeedStream stream);

std::vector<std::size_t> model_widths(const ExperimentConfig& cfg, std::size_t dim, std::size_t classes);

// In-memory pipeline pieces.
TrainTest generate_data(const ExperimentConfig& cfg);
struct TrainedModel {
  Mlp model;
  std::vector<EpochLog> log;
  double seconds = 0.0;
};
TrainedModel train_original(const ExperimentConfig& cfg, const Dataset& train);
UnlearningSplit make_split(const ExperimentConfig& cfg, const TrainTest& data);
BaselineSpec baseline_spec(const ExperimentConfig& cfg, BaselineMethod method);
UnlearnConfig unlearn_config(const ExperimentConfig& cfg);

struct MethodRun {
  Mlp model;
  double seconds = 0.0;
  std::string log_jsonl;
  std::vector<std::string> notes;
};
// "unlearned" runs unlearning; any baseline name runs that baseline.
MethodRun run_method(const ExperimentConfig& cfg, const Mlp& original, const UnlearningSplit& split,
                     const std::string& method);

struct GammaRow {
  double gamma = 0.0;
  MetricsReport report;
  double fd1_all = 0.0;  // definition-1 distance over D_r and D_f together
};
struct GammaAblation {
  std::vector<GammaRow> rows;
  double spearman_fd1 = 0.0;     // rank correlation of gamma vs fd1_all
  double retained_acc_spread = 0.0;
};
GammaAblation ablate_gamma(const ExperimentConfig& cfg, const Mlp& original, const Mlp* retrained,
                           const UnlearningSplit& split);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

// Commands. Everything lands under cfg.out:
//   data/{train,test}.csv data/manifest.json
//   models/<name>.json  logs/<name>.jsonl  timing/<name>.json
//   reports/<name>.json reports/metrics.csv  ablation/gamma.{csv,json}
void cmd_gen_data(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
void cmd_unlearn(const ExperimentConfig& cfg);
void cmd_baseline(const ExperimentConfig& cfg, const std::string& method);
void cmd_eval(const ExperimentConfig& cfg, const std::vector<std::string>& models);
void cmd_ablate_gamma(const ExperimentConfig& cfg);

}  // namespace rfau
