#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rfau/data.hpp"
#include "rfau/model.hpp"

namespace rfau {

// Fraction of rows whose argmax prediction matches the label (ties go to the lowest index).
double accuracy(const Mlp& model, const Dataset& data);

// Mean over rows of ||softmax(a(x)) - softmax(b(x))||_2.
double activation_distance(const Mlp& a, const Mlp& b, const Matrix& x);

// Mean over rows of sum over `layers` of mean_j |x_k^a - x_k^b| (pre-activation
// features). `layers` empty means every hidden layer. With `relative`, each
// term is |a - b| / (|b| + 1e-12) instead.
double feature_distance(const Mlp& a, const Mlp& b, const Matrix& x, std::span<const std::size_t> layers = {},
                        bool relative = false);

// Per-row prediction entropy, the attack's only feature.
Vector attack_features(const Mlp& model, const Matrix& x);

// 1-D logistic regression on the standardized entropy feature.
struct AttackModel {
  double weight = 0.0;
  double bias = 0.0;
  double mean = 0.0;
  double std = 1.0;

  double member_probability(double feature) const;
  bool is_member(double feature) const { return member_probability(feature) >= 0.5; }
};

struct AttackFit {
  std::size_t iterations = 200;
  double lr = 0.1;
};

// Members labelled 1, non-members 0. Throws DegenerateError when the pooled
// feature has zero variance.
AttackModel fit_attack(std::span<const double> members, std::span<const double> non_members,
                       const AttackFit& fit = {});
double attack_accuracy(const AttackModel& attack, std::span<const double> members,
                       std::span<const double> non_members);

// D_t rows are non-members, D_r rows members; the larger side is subsampled
// to the size of the smaller one.
AttackModel train_attack(const Mlp& model, const Dataset& test, const Dataset& retained, Rng& rng,
                         const AttackFit& fit = {});

// Fraction of D_f rows classified as members.
double mia_success(const AttackModel& attack, const Mlp& model, const Dataset& forget);

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

double measure_wall_time(const std::function<void()>& procedure);

struct SubsetMetrics {
  std::string name;  // D_r, D_f, D_t, D_rt, D_ft
  double accuracy = 0.0;
  std::optional<double> activation_distance;  // vs the retrained model
  double feature_distance_def1 = 0.0;         // vs the original model
  std::optional<double> feature_distance_def2;  // vs the retrained model
};

struct MetricsReport {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<SubsetMetrics> subsets;
  double mia_success = 0.5;
  bool mia_degenerate = false;
  double wall_time_seconds = 0.0;

  const SubsetMetrics& subset(const std::string& name) const;
  const SubsetMetrics* find(const std::string& name) const;
};

struct EvalOptions {
  std::vector<std::size_t> layers;  // empty: every hidden layer
  bool relative_feature_distance = false;
  std::uint64_t attack_seed = 0;
};

// Full metric grid for `model`. `retrained`, when given, supplies the
// activation distance and definition-2 feature distance.
MetricsReport evaluate(const Mlp& model, const Mlp& original, const Mlp* retrained, const UnlearningSplit& split,
                       const EvalOptions& options = {});

// {"content": {...}, "content_hash": sha256(content), "run": {"wall_time_seconds": ...}}
nlohmann::ordered_json report_content(const MetricsReport& report);
nlohmann::ordered_json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& doc);
std::string report_json_text(const MetricsReport& report);

std::string sha256_hex(const std::string& text);

// Fixed column order, one row per report. Missing values are empty cells.
std::vector<std::string> csv_columns();
std::string csv_header();
std::string csv_row(const MetricsReport& report);

}  // namespace rfau
