#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "pie/experiment.hpp"

namespace ex = pie::experiment;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;
constexpr int kCheckFailed = 4;

int cmd_train(const std::string& config_path) {
  const ex::ExperimentConfig c = ex::load_config(config_path);
  if (!c.denoiser.learned) throw ex::ConfigError("/denoiser/type", "`train` needs a learned denoiser");
  auto [model, losses] = ex::train_denoiser(c);
  if (c.denoiser.checkpoint.has_parent_path()) std::filesystem::create_directories(c.denoiser.checkpoint.parent_path());
  pie::save_checkpoint(c.denoiser.checkpoint, model);
  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) csv += std::to_string(i) + "," + ex::fmt(losses[i]) + "\n";
  ex::write_text(c.output / "train_loss.csv", csv);
  const auto smoothed = pie::smooth(losses, 100);
  std::cout << "trained " << losses.size() << " steps; smoothed loss " << smoothed[std::min<std::size_t>(99, smoothed.size() - 1)]
            << " -> " << smoothed.back() << "\ncheckpoint: " << c.denoiser.checkpoint.string() << "\n";
  return kOk;
}

int cmd_run(const std::string& config_path) {
  const ex::ExperimentConfig c = ex::load_config(config_path);
  const auto report = ex::run_experiment(c);
  std::cout << "wrote " << c.output.string() << " (" << report["method"].get<std::string>() << ", "
            << c.seeds.size() << " seeds)\n";
  return kOk;
}

int cmd_sweep(const std::string& config_path, const std::string& grid) {
  const ex::ExperimentConfig c = ex::load_config(config_path);
  ex::sweep(c, grid);
  std::cout << "wrote " << (c.output / ("sweep_" + grid + ".csv")).string() << "\n";
  return kOk;
}

int cmd_report(const std::string& dir) {
  std::cout << ex::report(dir).dump(2) << "\n";
  return kOk;
}

int cmd_check(const std::string& dir) {
  const auto results = ex::check(dir);
  bool ok = true;
  for (const auto& r : results) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    ok = ok && r.pass;
  }
  if (results.empty()) std::cout << "no applicable checks\n";
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Progressive image editing experiments"};
  app.require_subcommand(1);

  std::string config;
  std::string dir;
  std::string grid;

  auto* run = app.add_subcommand("run", "Run the configured method for every seed");
  run->add_option("config", config, "Experiment config (JSON)")->required();
  auto* sweep = app.add_subcommand("sweep", "Sweep one hyperparameter grid");
  sweep->add_option("config", config, "Experiment config (JSON)")->required();
  sweep->add_option("--grid", grid, "Grid name: gamma, N, beta1, beta2 or mask")->required();
  auto* report = app.add_subcommand("report", "Summarize an artifact directory");
  report->add_option("dir", dir, "Artifact directory")->required();
  auto* check = app.add_subcommand("check", "Check trend and bound expectations");
  check->add_option("dir", dir, "Artifact directory")->required();
  auto* train = app.add_subcommand("train", "Train the learned denoiser named in the config");
  train->add_option("config", config, "Experiment config (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config);
    if (*sweep) return cmd_sweep(config, grid);
    if (*report) return cmd_report(dir);
    if (*check) return cmd_check(dir);
    if (*train) return cmd_train(config);
  } catch (const ex::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kOk;
}
