// SPDX-License-Identifier: Apache-2.0
// curvloc: command-line front end for the experiment commands.
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "curvloc/binary_io.hpp"
#include "curvloc/experiments.hpp"

namespace ex = curvloc::experiments;

namespace {

struct CommonArgs {
  std::string config;
  std::optional<int> workers;
  std::optional<std::string> output_dir;
};

ex::RunConfig load_config(const CommonArgs& args) {
  ex::RunConfig cfg = args.config.empty() ? ex::RunConfig{} : ex::RunConfig::load(args.config);
  if (args.workers) cfg.workers = *args.workers;
  if (args.output_dir) cfg.output_dir = *args.output_dir;
  return cfg;
}

void print_eval_rows(const std::string& title, const std::vector<curvloc::eval::EvalResult>& rows) {
  if (rows.empty()) return;
  std::cout << "[" << title << "]\n" << curvloc::eval::localization_csv(rows);
}

int run(int argc, char** argv) {
  CLI::App app{"Coordinate-wise curvature localization experiments"};
  app.require_subcommand(1);

  CommonArgs args;
  bool inject_sign = false;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("-c,--config", args.config, "Run configuration (JSON)");
    if (config_required) opt->required()->check(CLI::ExistingFile);
    sub->add_option("-j,--workers", args.workers, "Worker threads (0: all cores)");
    sub->add_option("-o,--output-dir", args.output_dir, "Override the output directory");
  };

  auto* oracle = app.add_subcommand("oracle", "Run the analytic oracle checks");
  add_common(oracle, false);
  oracle->add_flag("--inject-prop1-sign-error", inject_sign, "Fault injection: flip the Hessian sign");
  auto* train = app.add_subcommand("train", "Generate the dataset and train the denoiser");
  add_common(train, true);
  auto* dynamics = app.add_subcommand("dynamics", "Track kappa_1 across checkpoints");
  add_common(dynamics, true);
  auto* localize = app.add_subcommand("localize", "Sample and compute localization maps");
  add_common(localize, true);
  auto* evaluate = app.add_subcommand("evaluate", "Score localization maps and detection");
  add_common(evaluate, true);
  auto* render = app.add_subcommand("render", "Re-render heatmaps from stored maps");
  add_common(render, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ex::kExitOk : ex::kExitConfigError;
  }

  auto cfg = load_config(args);
  if (oracle->parsed()) {
    if (inject_sign) cfg.oracle.inject_prop1_sign_error = true;
    const auto report = ex::cmd_oracle(cfg, &std::cout);
    std::cout << (report.all_pass() ? "all oracle checks passed" : "oracle check FAILURE") << '\n';
    return report.all_pass() ? ex::kExitOk : ex::kExitCheckFailure;
  }
  if (train->parsed()) {
    const auto summary = ex::cmd_train(cfg, &std::cout);
    std::cout << "wrote " << summary.checkpoints.size() << " checkpoints\n";
  } else if (dynamics->parsed()) {
    const auto rows = ex::cmd_dynamics(cfg);
    std::cout << "step,t_eval,kappa1_dup,kappa1_1d,kappa_star\n";
    for (const auto& r : rows) {
      std::cout << r.step << ',' << r.t_eval << ',' << r.kappa1_dup << ',' << r.kappa1_1d << ',' << r.kappa_star
                << '\n';
    }
  } else if (localize->parsed()) {
    const auto entries = ex::cmd_localize(cfg, &std::cout);
    std::cout << "wrote " << entries.size() << " maps\n";
  } else if (evaluate->parsed()) {
    const auto summary = ex::cmd_evaluate(cfg);
    print_eval_rows("tv", summary.tv);
    print_eval_rows("tv_nonmem", summary.tv_nonmem);
    print_eval_rows("all", summary.all);
    if (!summary.detection.empty()) std::cout << "[detection]\n" << curvloc::eval::detection_csv(summary.detection);
  } else if (render->parsed()) {
    const int degenerate = ex::cmd_render(cfg);
    if (degenerate > 0) std::cerr << "warning: " << degenerate << " maps had a degenerate value range\n";
  }
  return ex::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const curvloc::diffusion::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return ex::kExitConfigError;
  } catch (const curvloc::model::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return ex::kExitConfigError;
  } catch (const curvloc::io::MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << '\n';
    return ex::kExitMissingInput;
  } catch (const curvloc::io::FormatError& e) {
    std::cerr << "malformed input: " << e.what() << '\n';
    return ex::kExitMissingInput;
  } catch (const curvloc::ad::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return ex::kExitNumericFailure;
  } catch (const curvloc::model::TrainingDivergence& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return ex::kExitNumericFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
