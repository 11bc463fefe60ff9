#include "rfau/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include <openssl/evp.h>

#include "rfau/error.hpp"

namespace rfau {

namespace {

void require_rows(const Matrix& x, const char* what) {
  if (x.rows() == 0) throw EmptyInputError(std::string(what) + ": no rows");
}

std::vector<std::size_t> hidden_layers(const Mlp& m) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k + 1 < m.num_layers(); ++k) out.push_back(k);
  return out;
}

double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace

double accuracy(const Mlp& model, const Dataset& data) {
  require_rows(data.x, "accuracy");
  const Matrix logits = predict_logits(model, data.x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (argmax(logits.row(i)) == data.label(i)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

double activation_distance(const Mlp& a, const Mlp& b, const Matrix& x) {
  require_rows(x, "activation_distance");
  if (a.output_width() != b.output_width()) throw ShapeError("activation_distance: output widths differ");
  const Matrix pa = predict_proba(a, x);
  const Matrix pb = predict_proba(b, x);
  double total = 0.0;
  Vector diff(pa.cols());
  for (std::size_t i = 0; i < pa.rows(); ++i) {
    for (std::size_t j = 0; j < pa.cols(); ++j) diff[j] = pa(i, j) - pb(i, j);
    total += l2_norm(diff);
  }
  return total / static_cast<double>(pa.rows());
}

double feature_distance(const Mlp& a, const Mlp& b, const Matrix& x, std::span<const std::size_t> layers,
                        bool relative) {
  require_rows(x, "feature_distance");
  if (a.widths() != b.widths()) throw ShapeError("feature_distance: architectures differ");
  std::vector<std::size_t> chosen(layers.begin(), layers.end());
  if (chosen.empty()) chosen = hidden_layers(a);
  for (auto k : chosen) {
    if (k >= a.num_layers()) throw ShapeError("feature_distance: layer " + std::to_string(k) + " out of range");
  }
  const FeatureTape ta = forward(a, x).tape;
  const FeatureTape tb = forward(b, x).tape;
  double total = 0.0;
  for (auto k : chosen) {
    const Matrix& fa = ta.pre[k];
    const Matrix& fb = tb.pre[k];
    double sum = 0.0;
    for (std::size_t i = 0; i < fa.rows(); ++i) {
      for (std::size_t j = 0; j < fa.cols(); ++j) {
        const double d = std::abs(fa(i, j) - fb(i, j));
        sum += relative ? d / (std::abs(fb(i, j)) + 1e-12) : d;
      }
    }
    total += sum / static_cast<double>(fa.cols());
  }
  return total / static_cast<double>(x.rows());
}

Vector attack_features(const Mlp& model, const Matrix& x) { return entropy_rows(predict_proba(model, x)); }

double AttackModel::member_probability(double feature) const {
  return sigmoid(weight * (feature - mean) / std + bias);
}

AttackModel fit_attack(std::span<const double> members, std::span<const double> non_members, const AttackFit& fit) {
  if (members.empty() || non_members.empty()) throw EmptyInputError("fit_attack: both classes need rows");
  const std::size_t n = members.size() + non_members.size();
  Vector feats(members.begin(), members.end());
  feats.insert(feats.end(), non_members.begin(), non_members.end());
  const double mean = std::accumulate(feats.begin(), feats.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double f : feats) var += (f - mean) * (f - mean);
  var /= static_cast<double>(n);
  const double std = std::sqrt(var);
  if (!(std > 1e-12)) throw DegenerateError("attack feature has zero variance");

  AttackModel m{0.0, 0.0, mean, std};
  Vector z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = (feats[i] - mean) / std;
  for (std::size_t it = 0; it < fit.iterations; ++it) {
    double gw = 0.0;
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double label = i < members.size() ? 1.0 : 0.0;
      const double err = sigmoid(m.weight * z[i] + m.bias) - label;
      gw += err * z[i];
      gb += err;
    }
    m.weight -= fit.lr * gw / static_cast<double>(n);
    m.bias -= fit.lr * gb / static_cast<double>(n);
  }
  return m;
}

double attack_accuracy(const AttackModel& attack, std::span<const double> members,
                       std::span<const double> non_members) {
  std::size_t hits = 0;
  for (double f : members) hits += attack.is_member(f) ? 1 : 0;
  for (double f : non_members) hits += attack.is_member(f) ? 0 : 1;
  return static_cast<double>(hits) / static_cast<double>(members.size() + non_members.size());
}

AttackModel train_attack(const Mlp& model, const Dataset& test, const Dataset& retained, Rng& rng,
                         const AttackFit& fit) {
  if (test.empty()) throw EmptyInputError("train_attack: D_t is empty");
  if (retained.empty()) throw EmptyInputError("train_attack: D_r is empty");
  const std::size_t n = std::min(test.size(), retained.size());
  auto take = [&](const Dataset& d) {
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (d.size() > n) {
      rng.shuffle(idx);
      idx.resize(n);
      std::sort(idx.begin(), idx.end());
    }
    return attack_features(model, d.subset(idx).x);
  };
  const Vector non_members = take(test);
  const Vector members = take(retained);
  return fit_attack(members, non_members, fit);
}

double mia_success(const AttackModel& attack, const Mlp& model, const Dataset& forget) {
  if (forget.empty()) throw EmptyInputError("mia_success: D_f is empty");
  const Vector f = attack_features(model, forget.x);
  const auto members = std::count_if(f.begin(), f.end(), [&](double v) { return attack.is_member(v); });
  return static_cast<double>(members) / static_cast<double>(f.size());
}

double measure_wall_time(const std::function<void()>& procedure) {
  Stopwatch sw;
  procedure();
  return sw.seconds();
}

const SubsetMetrics* MetricsReport::find(const std::string& name) const {
  for (const auto& s : subsets) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

const SubsetMetrics& MetricsReport::subset(const std::string& name) const {
  if (const auto* s = find(name)) return *s;
  throw ConfigError("report has no subset " + name);
}

MetricsReport evaluate(const Mlp& model, const Mlp& original, const Mlp* retrained, const UnlearningSplit& split,
                       const EvalOptions& options) {
  if (model.widths() != original.widths()) throw ShapeError("evaluate: model and original architectures differ");
  if (retrained && retrained->widths() != model.widths()) {
    throw ShapeError("evaluate: model and retrained architectures differ");
  }
  MetricsReport report;
  auto add = [&](const std::string& name, const Dataset& d) {
    if (d.empty()) return;
    SubsetMetrics s;
    s.name = name;
    s.accuracy = accuracy(model, d);
    s.feature_distance_def1 =
        feature_distance(model, original, d.x, options.layers, options.relative_feature_distance);
    if (retrained) {
      s.activation_distance = activation_distance(model, *retrained, d.x);
      s.feature_distance_def2 =
          feature_distance(model, *retrained, d.x, options.layers, options.relative_feature_distance);
    }
    report.subsets.push_back(std::move(s));
  };
  add("D_r", split.retained);
  add("D_f", split.forget);
  add("D_t", split.test);
  if (split.retained_test) add("D_rt", *split.retained_test);
  if (split.forget_test) add("D_ft", *split.forget_test);

  Rng rng(options.attack_seed);
  try {
    const AttackModel attack = train_attack(model, split.test, split.retained, rng);
    report.mia_success = mia_success(attack, model, split.forget);
  } catch (const DegenerateError&) {
    report.mia_success = 0.5;
    report.mia_degenerate = true;
  }
  return report;
}

std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

namespace {

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

nlohmann::ordered_json report_content(const MetricsReport& report) {
  nlohmann::ordered_json c;
  c["method"] = report.method;
  c["seed"] = report.seed;
  c["config_hash"] = report.config_hash;
  nlohmann::ordered_json subsets = nlohmann::ordered_json::object();
  for (const auto& s : report.subsets) {
    nlohmann::ordered_json j;
    j["accuracy"] = s.accuracy;
    j["activation_distance"] = optional_json(s.activation_distance);
    j["feature_distance_def1"] = s.feature_distance_def1;
    j["feature_distance_def2"] = optional_json(s.feature_distance_def2);
    subsets[s.name] = j;
  }
  c["subsets"] = subsets;
  c["mia_success"] = report.mia_success;
  c["mia_degenerate"] = report.mia_degenerate;
  return c;
}

nlohmann::ordered_json report_to_json(const MetricsReport& report) {
  nlohmann::ordered_json doc;
  doc["content"] = report_content(report);
  doc["content_hash"] = sha256_hex(doc["content"].dump());
  doc["run"] = {{"wall_time_seconds", report.wall_time_seconds}};
  return doc;
}

std::string report_json_text(const MetricsReport& report) { return report_to_json(report).dump(2) + "\n"; }

MetricsReport report_from_json(const nlohmann::json& doc) {
  try {
    MetricsReport r;
    const auto& c = doc.at("content");
    r.method = c.at("method").get<std::string>();
    r.seed = c.at("seed").get<std::uint64_t>();
    r.config_hash = c.at("config_hash").get<std::string>();
    // nlohmann::json sorts keys; restore the canonical subset order.
    for (const char* name : {"D_r", "D_f", "D_t", "D_rt", "D_ft"}) {
      if (!c.at("subsets").contains(name)) continue;
      const auto& j = c.at("subsets").at(name);
      SubsetMetrics s;
      s.name = name;
      s.accuracy = j.at("accuracy").get<double>();
      if (!j.at("activation_distance").is_null()) s.activation_distance = j.at("activation_distance").get<double>();
      s.feature_distance_def1 = j.at("feature_distance_def1").get<double>();
      if (!j.at("feature_distance_def2").is_null()) {
        s.feature_distance_def2 = j.at("feature_distance_def2").get<double>();
      }
      r.subsets.push_back(std::move(s));
    }
    r.mia_success = c.at("mia_success").get<double>();
    r.mia_degenerate = c.at("mia_degenerate").get<bool>();
    r.wall_time_seconds = doc.at("run").at("wall_time_seconds").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  }
}

namespace {

const char* const kSubsetNames[] = {"D_r", "D_f", "D_t", "D_rt", "D_ft"};

std::string cell(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string cell(const std::optional<double>& v) { return v ? cell(*v) : std::string(); }

}  // namespace

std::vector<std::string> csv_columns() {
  std::vector<std::string> cols = {"method", "seed", "config_hash"};
  for (const char* metric : {"acc", "ad", "fd1", "fd2"}) {
    for (const char* s : kSubsetNames) cols.push_back(std::string(metric) + "_" + s);
  }
  cols.insert(cols.end(), {"mia_success", "mia_degenerate", "wall_time_seconds"});
  return cols;
}

std::string csv_header() {
  std::string out;
  for (const auto& c : csv_columns()) out += (out.empty() ? "" : ",") + c;
  return out + "\n";
}

std::string csv_row(const MetricsReport& report) {
  std::vector<std::string> cells = {report.method, std::to_string(report.seed), report.config_hash};
  auto per_subset = [&](auto getter) {
    for (const char* name : kSubsetNames) {
      const auto* s = report.find(name);
      cells.push_back(s ? getter(*s) : std::string());
    }
  };
  per_subset([](const SubsetMetrics& s) { return cell(s.accuracy); });
  per_subset([](const SubsetMetrics& s) { return cell(s.activation_distance); });
  per_subset([](const SubsetMetrics& s) { return cell(s.feature_distance_def1); });
  per_subset([](const SubsetMetrics& s) { return cell(s.feature_distance_def2); });
  cells.push_back(cell(report.mia_success));
  cells.push_back(report.mia_degenerate ? "1" : "0");
  cells.push_back(cell(report.wall_time_seconds));
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
  return out + "\n";
}

}  // namespace rfau
