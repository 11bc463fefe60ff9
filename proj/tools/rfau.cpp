#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rfau/error.hpp"
#include "rfau/experiment.hpp"

namespace {

int run(int argc, char** argv) {
  CLI::App app{"Residual feature alignment unlearning experiments"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file");

  // One flag per config leaf; --seed and --out fall out of the same scheme.
  const auto paths = rfau::config_paths();
  std::map<std::string, std::string> raw;
  std::vector<std::pair<std::string, CLI::Option*>> flags;
  for (const auto& path : paths) {
    auto* opt = app.add_option(rfau::flag_for_path(path), raw[path], "overrides " + path);
    flags.emplace_back(path, opt);
  }

  auto* gen = app.add_subcommand("gen-data", "write the synthetic train/test CSVs");
  auto* train = app.add_subcommand("train", "train the original model");
  auto* unlearn = app.add_subcommand("unlearn", "run residual feature alignment unlearning");
  auto* baseline = app.add_subcommand("baseline", "run a baseline unlearning method");
  std::string method;
  baseline->add_option("method", method, "retrain, finetune, neggrad or badt")->required();
  auto* eval = app.add_subcommand("eval", "compute metric reports");
  std::vector<std::string> models;
  eval->add_option("models", models, "model names under models/ (default: all present)");
  auto* ablate = app.add_subcommand("ablate-gamma", "sweep gamma and tabulate accuracy and feature distance");
  for (auto* sub : {gen, train, unlearn, baseline, eval, ablate}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(rfau::ExitCode::config);
  }

  std::map<std::string, std::string> overrides;
  for (const auto& [path, opt] : flags) {
    if (opt->count() > 0) overrides[path] = raw[path];
  }
  std::optional<std::filesystem::path> file;
  if (!config_path.empty()) file = config_path;
  const rfau::ExperimentConfig cfg = rfau::resolve_config(file, overrides);

  if (gen->parsed()) rfau::cmd_gen_data(cfg);
  if (train->parsed()) rfau::cmd_train(cfg);
  if (unlearn->parsed()) rfau::cmd_unlearn(cfg);
  if (baseline->parsed()) rfau::cmd_baseline(cfg, method);
  if (eval->parsed()) rfau::cmd_eval(cfg, models);
  if (ablate->parsed()) rfau::cmd_ablate_gamma(cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const rfau::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(rfau::ExitCode::io);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
