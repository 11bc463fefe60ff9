#include "rfau/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "rfau/checkpoint.hpp"
#include "rfau/error.hpp"

namespace rfau {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

ExperimentConfig default_config() { return ExperimentConfig{}; }

namespace {

std::string split_mode_name(SplitMode m) { return m == SplitMode::class_wise ? "class" : "sample"; }

template <typename T>
ojson array_json(const std::vector<T>& v) {
  ojson a = ojson::array();
  for (const auto& x : v) a.push_back(x);
  return a;
}

}  // namespace

ojson config_to_json(const ExperimentConfig& cfg) {
  ojson j;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out;
  const auto& d = cfg.data;
  j["data"] = {{"source", d.source},
               {"classes", d.synthetic.classes},
               {"per_class", d.synthetic.per_class},
               {"dim", d.synthetic.dim},
               {"separation", d.synthetic.separation},
               {"std", d.synthetic.std},
               {"train_csv", d.train_csv},
               {"test_csv", d.test_csv},
               {"train_images", d.train_images},
               {"train_labels", d.train_labels},
               {"test_images", d.test_images},
               {"test_labels", d.test_labels},
               {"subsample", d.subsample},
               {"idx_classes", d.idx_classes}};
  j["model"] = {{"hidden", array_json(cfg.hidden)}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch", cfg.train.batch},
                {"lr", cfg.train.lr},
                {"optimizer", to_string(cfg.train.optimizer)},
                {"weight_decay", cfg.train.weight_decay}};
  j["split"] = {{"mode", split_mode_name(cfg.split.mode)},
                {"class_id", cfg.split.class_id},
                {"n_forget", cfg.split.n_forget}};
  const auto& u = cfg.unlearn;
  j["unlearn"] = {{"alpha", u.alpha},
                  {"beta", u.beta},
                  {"lambda", u.lambda},
                  {"mu", u.mu},
                  {"gamma", u.gamma},
                  {"rank", u.rank},
                  {"lr", u.lr},
                  {"epochs", u.epochs},
                  {"batch", u.batch},
                  {"layers", array_json(u.layers)},
                  {"mode", to_string(u.mode)},
                  {"optimizer", to_string(u.optimizer)},
                  {"weight_decay", u.weight_decay},
                  {"a_init_std", u.a_init_std},
                  {"lora_scale", u.lora_scale},
                  {"running_decay", u.running_decay},
                  {"target_scope", to_string(u.target_scope)}};
  const auto& b = cfg.baseline;
  j["baseline"] = {{"methods", array_json(b.methods)},
                   {"epochs", b.epochs},
                   {"lr", b.lr},
                   {"batch", b.batch},
                   {"optimizer", to_string(b.optimizer)},
                   {"weight_decay", b.weight_decay},
                   {"temperature", b.temperature},
                   {"clip_norm", b.clip_norm}};
  j["eval"] = {{"layers", array_json(cfg.eval.layers)},
               {"relative_feature_distance", cfg.eval.relative_feature_distance}};
  j["ablation"] = {{"gammas", array_json(cfg.gammas)}};
  return j;
}

namespace {

enum class Kind { unsigned_int, real, boolean, text, object, list_unsigned, list_real, list_text };

Kind kind_of(const std::string& path, const ojson& def) {
  if (def.is_object()) return Kind::object;
  if (def.is_boolean()) return Kind::boolean;
  if (def.is_string()) return Kind::text;
  if (def.is_number_unsigned() || def.is_number_integer()) return Kind::unsigned_int;
  if (def.is_number()) return Kind::real;
  if (path == "ablation.gammas") return Kind::list_real;
  if (path == "baseline.methods") return Kind::list_text;
  return Kind::list_unsigned;
}

bool matches(Kind k, const nlohmann::json& v) {
  switch (k) {
    case Kind::unsigned_int: return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    case Kind::real: return v.is_number();
    case Kind::boolean: return v.is_boolean();
    case Kind::text: return v.is_string();
    case Kind::object: return v.is_object();
    case Kind::list_unsigned:
      return v.is_array() && std::ranges::all_of(v, [](const auto& e) { return matches(Kind::unsigned_int, e); });
    case Kind::list_real:
      return v.is_array() && std::ranges::all_of(v, [](const auto& e) { return e.is_number(); });
    case Kind::list_text:
      return v.is_array() && std::ranges::all_of(v, [](const auto& e) { return e.is_string(); });
  }
  return false;
}

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::unsigned_int: return "a non-negative integer";
    case Kind::real: return "a number";
    case Kind::boolean: return "true or false";
    case Kind::text: return "a string";
    case Kind::object: return "an object";
    case Kind::list_unsigned: return "a list of non-negative integers";
    case Kind::list_real: return "a list of numbers";
    case Kind::list_text: return "a list of strings";
  }
  return "?";
}

// Records unknown keys and type mismatches in `out`; `kept` receives the
// well-formed remainder so range checks can still run on it.
void check_shape(const nlohmann::json& doc, const ojson& defaults, const std::string& prefix,
                 std::vector<std::string>& out, nlohmann::json& kept) {
  kept = nlohmann::json::object();
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!defaults.contains(it.key())) {
      out.push_back(path + ": unknown key");
      continue;
    }
    const ojson& def = defaults.at(it.key());
    const Kind k = kind_of(path, def);
    if (!matches(k, it.value())) {
      out.push_back(path + ": expected " + std::string(kind_name(k)));
      continue;
    }
    if (k == Kind::object) {
      check_shape(it.value(), def, path, out, kept[it.key()]);
    } else {
      kept[it.key()] = it.value();
    }
  }
}

void collect_leaves(const ojson& node, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = node.begin(); it != node.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.value().is_object()) {
      collect_leaves(it.value(), path, out);
    } else {
      out.push_back(path);
    }
  }
}

std::string pointer(const std::string& path) {
  std::string p = "/" + path;
  std::replace(p.begin(), p.end(), '.', '/');
  return p;
}

void throw_violations(const std::string& header, const std::vector<std::string>& v) {
  std::string msg = header;
  for (const auto& s : v) msg += "\n  " + s;
  throw ConfigError(msg);
}

template <typename T>
std::vector<T> list_of(const nlohmann::json& j) {
  std::vector<T> out;
  for (const auto& e : j) out.push_back(e.get<T>());
  return out;
}

template <typename Parse>
auto parse_or_note(const std::string& text, const std::string& path, std::vector<std::string>& out, Parse parse,
                   decltype(parse(text)) fallback) {
  try {
    return parse(text);
  } catch (const ConfigError& e) {
    out.push_back(path + ": " + e.what());
    return fallback;
  }
}

SplitMode parse_split_mode(const std::string& s) {
  if (s == "class") return SplitMode::class_wise;
  if (s == "sample") return SplitMode::sample_wise;
  throw ConfigError("unknown split mode '" + s + "' (valid: class, sample)");
}

}  // namespace

std::vector<std::string> config_violations(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  const auto& d = cfg.data;
  if (d.source == "synthetic") {
    const auto& s = d.synthetic;
    if (s.classes < 2) out.push_back("data.classes must be >= 2");
    if (s.per_class < 2) out.push_back("data.per_class must be >= 2");
    if (s.dim < 1) out.push_back("data.dim must be >= 1");
    if (s.classes >= 1 && s.dim + 1 < s.classes) out.push_back("data.dim must be >= data.classes - 1");
    if (!(s.separation > 0.0)) out.push_back("data.separation must be > 0");
    if (!(s.std > 0.0)) out.push_back("data.std must be > 0");
    if (cfg.split.mode == SplitMode::class_wise && cfg.split.class_id >= s.classes) {
      out.push_back("split.class_id must be < data.classes");
    }
  } else if (d.source == "csv") {
    if (d.train_csv.empty()) out.push_back("data.train_csv is required when data.source is csv");
    if (d.test_csv.empty()) out.push_back("data.test_csv is required when data.source is csv");
  } else if (d.source == "idx") {
    if (d.train_images.empty() || d.train_labels.empty() || d.test_images.empty() || d.test_labels.empty()) {
      out.push_back("data.train_images, train_labels, test_images and test_labels are required for idx");
    }
    if (d.idx_classes < 2) out.push_back("data.idx_classes must be >= 2");
  } else {
    out.push_back("data.source must be one of synthetic, csv, idx");
  }
  if (cfg.hidden.empty()) out.push_back("model.hidden needs at least one hidden layer");
  if (std::ranges::find(cfg.hidden, 0u) != cfg.hidden.end()) out.push_back("model.hidden widths must be >= 1");
  if (cfg.train.batch < 1) out.push_back("train.batch must be >= 1");
  if (!(cfg.train.lr >= 0.0)) out.push_back("train.lr must be >= 0");
  if (!(cfg.train.weight_decay >= 0.0)) out.push_back("train.weight_decay must be >= 0");
  if (cfg.split.mode == SplitMode::sample_wise && cfg.split.n_forget < 1) out.push_back("split.n_forget must be >= 1");
  for (const auto& v : cfg.unlearn.violations()) out.push_back(v);
  for (auto k : cfg.unlearn.layers) {
    if (k >= cfg.hidden.size() + 1) out.push_back("unlearn.layers: layer " + std::to_string(k) + " out of range");
  }
  for (auto k : cfg.eval.layers) {
    if (k >= cfg.hidden.size() + 1) out.push_back("eval.layers: layer " + std::to_string(k) + " out of range");
  }
  for (const auto& name : cfg.baseline.methods) {
    try {
      for (const auto& v : baseline_spec(cfg, parse_baseline(name)).violations()) out.push_back(v);
    } catch (const ConfigError& e) {
      out.push_back(std::string("baseline.methods: ") + e.what());
    }
  }
  if (cfg.gammas.empty()) out.push_back("ablation.gammas must not be empty");
  for (double g : cfg.gammas) {
    if (!(g >= 0.0 && g <= 1.0)) out.push_back("ablation.gammas: " + std::to_string(g) + " is outside [0, 1]");
  }
  return out;
}

ExperimentConfig config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg;
  const ojson defaults = config_to_json(cfg);
  std::vector<std::string> errors;
  nlohmann::json kept;
  check_shape(doc, defaults, "", errors, kept);

  nlohmann::json j = nlohmann::json::parse(defaults.dump());
  j.merge_patch(kept);

  cfg.seed = j["seed"].get<std::uint64_t>();
  cfg.out = j["out"].get<std::string>();
  const auto& d = j["data"];
  cfg.data.source = d["source"].get<std::string>();
  cfg.data.synthetic.classes = d["classes"].get<std::size_t>();
  cfg.data.synthetic.per_class = d["per_class"].get<std::size_t>();
  cfg.data.synthetic.dim = d["dim"].get<std::size_t>();
  cfg.data.synthetic.separation = d["separation"].get<double>();
  cfg.data.synthetic.std = d["std"].get<double>();
  cfg.data.train_csv = d["train_csv"].get<std::string>();
  cfg.data.test_csv = d["test_csv"].get<std::string>();
  cfg.data.train_images = d["train_images"].get<std::string>();
  cfg.data.train_labels = d["train_labels"].get<std::string>();
  cfg.data.test_images = d["test_images"].get<std::string>();
  cfg.data.test_labels = d["test_labels"].get<std::string>();
  cfg.data.subsample = d["subsample"].get<std::size_t>();
  cfg.data.idx_classes = d["idx_classes"].get<std::size_t>();
  cfg.hidden = list_of<std::size_t>(j["model"]["hidden"]);

  const auto& t = j["train"];
  cfg.train.epochs = t["epochs"].get<std::size_t>();
  cfg.train.batch = t["batch"].get<std::size_t>();
  cfg.train.lr = t["lr"].get<double>();
  cfg.train.optimizer = parse_or_note(t["optimizer"].get<std::string>(), "train.optimizer", errors, parse_optimizer,
                                      OptimizerKind::adamw);
  cfg.train.weight_decay = t["weight_decay"].get<double>();

  const auto& s = j["split"];
  cfg.split.mode = parse_or_note(s["mode"].get<std::string>(), "split.mode", errors, parse_split_mode,
                                 SplitMode::class_wise);
  cfg.split.class_id = s["class_id"].get<std::size_t>();
  cfg.split.n_forget = s["n_forget"].get<std::size_t>();

  const auto& u = j["unlearn"];
  auto& uc = cfg.unlearn;
  uc.alpha = u["alpha"].get<double>();
  uc.beta = u["beta"].get<double>();
  uc.lambda = u["lambda"].get<double>();
  uc.mu = u["mu"].get<double>();
  uc.gamma = u["gamma"].get<double>();
  uc.rank = u["rank"].get<std::size_t>();
  uc.lr = u["lr"].get<double>();
  uc.epochs = u["epochs"].get<std::size_t>();
  uc.batch = u["batch"].get<std::size_t>();
  uc.layers = list_of<std::size_t>(u["layers"]);
  uc.mode = parse_or_note(u["mode"].get<std::string>(), "unlearn.mode", errors, parse_unlearn_mode,
                          UnlearnMode::residual);
  uc.optimizer = parse_or_note(u["optimizer"].get<std::string>(), "unlearn.optimizer", errors, parse_optimizer,
                               OptimizerKind::adamw);
  uc.weight_decay = u["weight_decay"].get<double>();
  uc.a_init_std = u["a_init_std"].get<double>();
  uc.lora_scale = u["lora_scale"].get<double>();
  uc.running_decay = u["running_decay"].get<double>();
  uc.target_scope = parse_or_note(u["target_scope"].get<std::string>(), "unlearn.target_scope", errors,
                                  parse_target_scope, TargetScope::batch);

  const auto& b = j["baseline"];
  cfg.baseline.methods = list_of<std::string>(b["methods"]);
  cfg.baseline.epochs = b["epochs"].get<std::size_t>();
  cfg.baseline.lr = b["lr"].get<double>();
  cfg.baseline.batch = b["batch"].get<std::size_t>();
  cfg.baseline.optimizer = parse_or_note(b["optimizer"].get<std::string>(), "baseline.optimizer", errors,
                                         parse_optimizer, OptimizerKind::adamw);
  cfg.baseline.weight_decay = b["weight_decay"].get<double>();
  cfg.baseline.temperature = b["temperature"].get<double>();
  cfg.baseline.clip_norm = b["clip_norm"].get<double>();

  cfg.eval.layers = list_of<std::size_t>(j["eval"]["layers"]);
  cfg.eval.relative_feature_distance = j["eval"]["relative_feature_distance"].get<bool>();
  cfg.gammas = list_of<double>(j["ablation"]["gammas"]);
  cfg.eval.attack_seed = stream_seed(cfg, SeedStream::attack);

  for (const auto& v : config_violations(cfg)) errors.push_back(v);
  if (!errors.empty()) throw_violations("invalid config:", errors);
  return cfg;
}

std::string config_hash(const ExperimentConfig& cfg) {
  ojson j = config_to_json(cfg);
  j.erase("out");
  return sha256_hex(j.dump());
}

std::vector<std::string> config_paths() {
  std::vector<std::string> out;
  collect_leaves(config_to_json(default_config()), "", out);
  return out;
}

std::string flag_for_path(const std::string& path) {
  std::string flag = "--" + path;
  std::replace(flag.begin(), flag.end(), '.', '-');
  std::replace(flag.begin(), flag.end(), '_', '-');
  return flag;
}

namespace {

std::optional<nlohmann::json> scalar_from_text(Kind k, const std::string& text) {
  switch (k) {
    case Kind::text: return nlohmann::json(text);
    case Kind::boolean:
      if (text == "true" || text == "1") return nlohmann::json(true);
      if (text == "false" || text == "0") return nlohmann::json(false);
      return std::nullopt;
    case Kind::unsigned_int: {
      std::uint64_t v = 0;
      auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || p != text.data() + text.size()) return std::nullopt;
      return nlohmann::json(v);
    }
    case Kind::real: {
      double v = 0;
      auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || p != text.data() + text.size()) return std::nullopt;
      return nlohmann::json(v);
    }
    default: return std::nullopt;
  }
}

std::optional<nlohmann::json> value_from_text(Kind k, const std::string& text) {
  Kind elem;
  switch (k) {
    case Kind::list_unsigned: elem = Kind::unsigned_int; break;
    case Kind::list_real: elem = Kind::real; break;
    case Kind::list_text: elem = Kind::text; break;
    default: return scalar_from_text(k, text);
  }
  nlohmann::json arr = nlohmann::json::array();
  if (text.empty()) return arr;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto v = scalar_from_text(elem, item);
    if (!v) return std::nullopt;
    arr.push_back(*v);
  }
  return arr;
}

}  // namespace

ExperimentConfig resolve_config(const std::optional<fs::path>& file,
                                const std::map<std::string, std::string>& overrides) {
  const ojson defaults = config_to_json(default_config());
  nlohmann::json doc = nlohmann::json::object();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw IoError("cannot open config file " + file->string());
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("config file " + file->string() + ": " + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config file " + file->string() + " must hold a JSON object");
  }
  std::vector<std::string> errors;
  for (const auto& [path, text] : overrides) {
    const ojson::json_pointer dptr(pointer(path));
    const nlohmann::json::json_pointer ptr(pointer(path));
    if (!defaults.contains(dptr)) {
      errors.push_back(flag_for_path(path) + ": unknown option");
      continue;
    }
    const Kind k = kind_of(path, defaults.at(dptr));
    auto v = value_from_text(k, text);
    if (!v) {
      errors.push_back(flag_for_path(path) + ": expected " + kind_name(k) + ", got '" + text + "'");
      continue;
    }
    doc[ptr] = *v;
  }
  if (!errors.empty()) throw_violations("invalid command-line options:", errors);
  return config_from_json(doc);
}

std::uint64_t stream_seed(const ExperimentConfig& cfg, SeedStream stream) {
  return derive_seed(cfg.seed, static_cast<std::uint64_t>(stream));
}

std::vector<std::size_t> model_widths(const ExperimentConfig& cfg, std::size_t dim, std::size_t classes) {
  std::vector<std::size_t> w{dim};
  w.insert(w.end(), cfg.hidden.begin(), cfg.hidden.end());
  w.push_back(classes);
  return w;
}

TrainTest generate_data(const ExperimentConfig& cfg) {
  Rng rng(stream_seed(cfg, SeedStream::data));
  return gen_gaussian_clusters(cfg.data.synthetic, rng);
}

TrainedModel train_original(const ExperimentConfig& cfg, const Dataset& train) {
  Rng rng(stream_seed(cfg, SeedStream::init));
  const auto widths = model_widths(cfg, train.dim(), train.classes);
  TrainedModel out;
  out.model = mlp_init(widths, rng);
  Stopwatch sw;
  out.log = train_supervised(out.model, train, cfg.train, rng);
  out.seconds = sw.seconds();
  return out;
}

UnlearningSplit make_split(const ExperimentConfig& cfg, const TrainTest& data) {
  SplitSpec spec = cfg.split;
  spec.seed = stream_seed(cfg, SeedStream::split);
  return split_unlearning(data.train, data.test, spec);
}

BaselineSpec baseline_spec(const ExperimentConfig& cfg, BaselineMethod method) {
  BaselineSpec s;
  s.method = method;
  s.epochs = cfg.baseline.epochs;
  s.lr = cfg.baseline.lr;
  s.batch = cfg.baseline.batch;
  s.optimizer = cfg.baseline.optimizer;
  s.weight_decay = cfg.baseline.weight_decay;
  s.temperature = cfg.baseline.temperature;
  s.clip_norm = cfg.baseline.clip_norm;
  s.seed = derive_seed(stream_seed(cfg, SeedStream::baseline), static_cast<std::uint64_t>(method));
  if (method == BaselineMethod::retrain) {
    s.epochs = cfg.train.epochs;
    s.lr = cfg.train.lr;
    s.batch = cfg.train.batch;
    s.optimizer = cfg.train.optimizer;
    s.weight_decay = cfg.train.weight_decay;
    s.seed = stream_seed(cfg, SeedStream::retrain_init);
  }
  return s;
}

UnlearnConfig unlearn_config(const ExperimentConfig& cfg) {
  UnlearnConfig u = cfg.unlearn;
  u.seed = stream_seed(cfg, SeedStream::unlearn);
  return u;
}

MethodRun run_method(const ExperimentConfig& cfg, const Mlp& original, const UnlearningSplit& split,
                     const std::string& method) {
  MethodRun out;
  if (method == "unlearned") {
    Stopwatch sw;
    UnlearnResult r = run_unlearning(original, split.retained, split.forget, unlearn_config(cfg));
    out.seconds = sw.seconds();
    out.model = std::move(r.model);
    out.log_jsonl = batch_log_jsonl(r.log);
    out.notes = std::move(r.notes);
    return out;
  }
  const BaselineSpec spec = baseline_spec(cfg, parse_baseline(method));
  Stopwatch sw;
  BaselineResult r = run_baseline(original, split.retained, split.forget, spec);
  out.seconds = sw.seconds();
  out.model = std::move(r.model);
  out.log_jsonl = baseline_log_jsonl(r.log);
  return out;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  auto ranks = [n](std::span<const double> v) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    Vector r(n);
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i + j) / 2.0) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const Vector rx = ranks(x);
  const Vector ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

GammaAblation ablate_gamma(const ExperimentConfig& cfg, const Mlp& original, const Mlp* retrained,
                           const UnlearningSplit& split) {
  std::vector<std::string> errors;
  if (cfg.gammas.empty()) errors.push_back("ablation.gammas must not be empty");
  for (double g : cfg.gammas) {
    if (!(g >= 0.0 && g <= 1.0)) errors.push_back("gamma " + std::to_string(g) + " is outside [0, 1]");
  }
  if (!errors.empty()) throw_violations("invalid gamma list:", errors);

  GammaAblation out;
  const Dataset all = concat(split.retained, split.forget);
  for (double g : cfg.gammas) {
    ExperimentConfig c = cfg;
    c.unlearn.gamma = g;
    const MethodRun run = run_method(c, original, split, "unlearned");
    GammaRow row;
    row.gamma = g;
    row.report = evaluate(run.model, original, retrained, split, cfg.eval);
    row.report.method = "unlearned";
    row.report.seed = cfg.seed;
    row.report.config_hash = config_hash(c);
    row.report.wall_time_seconds = run.seconds;
    row.fd1_all = feature_distance(run.model, original, all.x, cfg.eval.layers, cfg.eval.relative_feature_distance);
    out.rows.push_back(std::move(row));
  }
  Vector gammas, fds, accs;
  for (const auto& r : out.rows) {
    gammas.push_back(r.gamma);
    fds.push_back(r.fd1_all);
    accs.push_back(r.report.subset("D_r").accuracy);
  }
  out.spearman_fd1 = spearman(gammas, fds);
  out.retained_acc_spread = *std::ranges::max_element(accs) - *std::ranges::min_element(accs);
  return out;
}

// ---- commands -------------------------------------------------------------

namespace {

fs::path out_dir(const ExperimentConfig& cfg) { return fs::path(cfg.out); }
fs::path model_path(const ExperimentConfig& cfg, const std::string& name) {
  return out_dir(cfg) / "models" / (name + ".json");
}

void write_json(const fs::path& path, const ojson& j) { write_text_file(path, j.dump(2) + "\n"); }

void write_timing(const ExperimentConfig& cfg, const std::string& name, double seconds) {
  write_json(out_dir(cfg) / "timing" / (name + ".json"), ojson{{"wall_time_seconds", seconds}});
}

std::optional<double> read_timing(const ExperimentConfig& cfg, const std::string& name) {
  std::ifstream in(out_dir(cfg) / "timing" / (name + ".json"));
  if (!in) return std::nullopt;
  try {
    return nlohmann::json::parse(in).at("wall_time_seconds").get<double>();
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

TrainTest load_data(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  if (d.source == "synthetic") {
    const fs::path train = out_dir(cfg) / "data" / "train.csv";
    const fs::path test = out_dir(cfg) / "data" / "test.csv";
    for (const auto& p : {train, test}) {
      if (!fs::exists(p)) throw IoError("missing dataset " + p.string() + " (run gen-data first)");
    }
    return {load_csv(train, d.synthetic.classes), load_csv(test, d.synthetic.classes)};
  }
  if (d.source == "csv") {
    Dataset train = load_csv(d.train_csv);
    Dataset test = load_csv(d.test_csv);
    const std::size_t classes = std::max(train.classes, test.classes);
    if (train.classes != classes) train = load_csv(d.train_csv, classes);
    if (test.classes != classes) test = load_csv(d.test_csv, classes);
    return {std::move(train), std::move(test)};
  }
  Rng rng(stream_seed(cfg, SeedStream::data));
  Dataset train = load_idx(d.train_images, d.train_labels, d.subsample, rng, d.idx_classes);
  Dataset test = load_idx(d.test_images, d.test_labels, 0, rng, d.idx_classes);
  return {std::move(train), std::move(test)};
}

Mlp load_model(const ExperimentConfig& cfg, const std::string& name) {
  const fs::path p = model_path(cfg, name);
  if (!fs::exists(p)) throw IoError("missing checkpoint " + p.string());
  return load_checkpoint(p).model;
}

nlohmann::json checkpoint_meta(const ExperimentConfig& cfg, const std::string& kind) {
  return {{"kind", kind}, {"seed", cfg.seed}, {"config_hash", config_hash(cfg)}};
}

std::string widths_text(const Mlp& m) {
  std::string s = "[";
  for (auto w : m.widths()) s += (s.size() > 1 ? "," : "") + std::to_string(w);
  return s + "]";
}

void save_run(const ExperimentConfig& cfg, const std::string& name, const MethodRun& run) {
  save_checkpoint(run.model, model_path(cfg, name), checkpoint_meta(cfg, name));
  write_text_file(out_dir(cfg) / "logs" / (name + ".jsonl"), run.log_jsonl);
  write_timing(cfg, name, run.seconds);
}

}  // namespace

void cmd_gen_data(const ExperimentConfig& cfg) {
  if (cfg.data.source != "synthetic") throw ConfigError("gen-data needs data.source = synthetic");
  const TrainTest data = generate_data(cfg);
  const fs::path dir = out_dir(cfg) / "data";
  write_csv(data.train, dir / "train.csv");
  write_csv(data.test, dir / "test.csv");
  ojson manifest;
  manifest["seed"] = cfg.seed;
  manifest["data_seed"] = stream_seed(cfg, SeedStream::data);
  manifest["params"] = config_to_json(cfg)["data"];
  manifest["train_rows"] = data.train.size();
  manifest["test_rows"] = data.test.size();
  write_json(dir / "manifest.json", manifest);
  std::cout << "wrote " << data.train.size() << " train and " << data.test.size() << " test rows to "
            << dir.string() << "\n";
}

void cmd_train(const ExperimentConfig& cfg) {
  const TrainTest data = load_data(cfg);
  const TrainedModel t = train_original(cfg, data.train);
  const double test_acc = accuracy(t.model, data.test);
  nlohmann::json meta = checkpoint_meta(cfg, "original");
  meta["test_accuracy"] = test_acc;
  save_checkpoint(t.model, model_path(cfg, "original"), meta);
  std::string log;
  for (const auto& e : t.log) {
    ojson j;
    j["epoch"] = e.epoch;
    j["loss"] = e.mean_loss;
    j["accuracy"] = e.accuracy;
    log += j.dump() + "\n";
  }
  write_text_file(out_dir(cfg) / "logs" / "original.jsonl", log);
  write_timing(cfg, "original", t.seconds);
  std::cout << "original model: test accuracy " << test_acc << "\n";
}

void cmd_unlearn(const ExperimentConfig& cfg) {
  const TrainTest data = load_data(cfg);
  const Mlp original = load_model(cfg, "original");
  const UnlearningSplit split = make_split(cfg, data);
  const MethodRun run = run_method(cfg, original, split, "unlearned");
  save_run(cfg, "unlearned", run);
  for (const auto& note : run.notes) std::cout << "note: " << note << "\n";
  std::cout << "unlearned in " << run.seconds << " s: D_r accuracy " << accuracy(run.model, split.retained)
            << ", D_f accuracy " << accuracy(run.model, split.forget) << "\n";
}

void cmd_baseline(const ExperimentConfig& cfg, const std::string& method) {
  parse_baseline(method);
  const TrainTest data = load_data(cfg);
  const Mlp original = load_model(cfg, "original");
  const UnlearningSplit split = make_split(cfg, data);
  const MethodRun run = run_method(cfg, original, split, method);
  save_run(cfg, method, run);
  std::cout << method << " in " << run.seconds << " s: D_r accuracy " << accuracy(run.model, split.retained)
            << ", D_f accuracy " << accuracy(run.model, split.forget) << "\n";
}

void cmd_eval(const ExperimentConfig& cfg, const std::vector<std::string>& models) {
  const TrainTest data = load_data(cfg);
  const Mlp original = load_model(cfg, "original");
  const UnlearningSplit split = make_split(cfg, data);
  std::optional<Mlp> retrained;
  if (fs::exists(model_path(cfg, "retrain"))) retrained = load_model(cfg, "retrain");

  std::vector<std::string> names = models;
  if (names.empty()) {
    std::vector<std::string> candidates = {"original", "unlearned"};
    candidates.insert(candidates.end(), cfg.baseline.methods.begin(), cfg.baseline.methods.end());
    for (const auto& n : candidates) {
      if (fs::exists(model_path(cfg, n)) && std::ranges::find(names, n) == names.end()) names.push_back(n);
    }
  }
  if (retrained && retrained->widths() != original.widths()) {
    throw ShapeError("architecture mismatch: retrain has widths " + widths_text(*retrained) + ", original has " +
                     widths_text(original));
  }
  std::vector<std::pair<std::string, Mlp>> loaded;
  for (const auto& n : names) {
    Mlp m = load_model(cfg, n);
    if (m.widths() != original.widths()) {
      throw ShapeError("architecture mismatch: " + n + " has widths " + widths_text(m) + ", original has " +
                       widths_text(original));
    }
    loaded.emplace_back(n, std::move(m));
  }

  std::string csv = csv_header();
  for (const auto& [name, model] : loaded) {
    MetricsReport r = evaluate(model, original, retrained ? &*retrained : nullptr, split, cfg.eval);
    r.method = name;
    r.seed = cfg.seed;
    r.config_hash = config_hash(cfg);
    r.wall_time_seconds = read_timing(cfg, name).value_or(0.0);
    write_text_file(out_dir(cfg) / "reports" / (name + ".json"), report_json_text(r));
    csv += csv_row(r);
    std::cout << name << ": D_r " << r.subset("D_r").accuracy << ", D_f " << r.subset("D_f").accuracy << ", D_t "
              << r.subset("D_t").accuracy << ", MIA " << r.mia_success << "\n";
  }
  write_text_file(out_dir(cfg) / "reports" / "metrics.csv", csv);
}

void cmd_ablate_gamma(const ExperimentConfig& cfg) {
  const TrainTest data = load_data(cfg);
  const Mlp original = load_model(cfg, "original");
  const UnlearningSplit split = make_split(cfg, data);
  std::optional<Mlp> retrained;
  if (fs::exists(model_path(cfg, "retrain"))) retrained = load_model(cfg, "retrain");
  const GammaAblation ab = ablate_gamma(cfg, original, retrained ? &*retrained : nullptr, split);

  const char* subsets[] = {"D_r", "D_f", "D_t", "D_rt", "D_ft"};
  std::string csv = "gamma";
  for (const char* s : subsets) csv += std::string(",acc_") + s;
  for (const char* s : subsets) csv += std::string(",fd1_") + s;
  csv += ",fd1_D\n";
  ojson rows = ojson::array();
  auto num = [](double v) { return ojson(v).dump(); };
  for (const auto& r : ab.rows) {
    csv += num(r.gamma);
    for (const char* s : subsets) csv += "," + (r.report.find(s) ? num(r.report.find(s)->accuracy) : "");
    for (const char* s : subsets) csv += "," + (r.report.find(s) ? num(r.report.find(s)->feature_distance_def1) : "");
    csv += "," + num(r.fd1_all) + "\n";
    ojson j;
    j["gamma"] = r.gamma;
    j["report"] = report_content(r.report);
    j["fd1_D"] = r.fd1_all;
    rows.push_back(j);
  }
  ojson summary;
  summary["config_hash"] = config_hash(cfg);
  summary["rows"] = rows;
  summary["spearman_fd1"] = ab.spearman_fd1;
  summary["retained_acc_spread"] = ab.retained_acc_spread;
  write_text_file(out_dir(cfg) / "ablation" / "gamma.csv", csv);
  write_json(out_dir(cfg) / "ablation" / "gamma.json", summary);
  std::cout << "gamma ablation: spearman(gamma, fd1) " << ab.spearman_fd1 << ", D_r accuracy spread "
            << ab.retained_acc_spread << "\n";
}

}  // namespace rfau
