// fwbnn: run or validate a width-sweep experiment.
//
//   fwbnn run <config> [--out DIR] [--seed N] [--estimators theory,importance,langevin]
//   fwbnn validate <config>

#include "fwbnn/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

fwbnn::ExperimentConfig load(const std::string& path, const std::string& out, const std::optional<std::uint64_t>& seed,
                             const std::string& estimators) {
  fwbnn::ExperimentConfig cfg = fwbnn::ExperimentConfig::load(path);
  if (!out.empty()) cfg.output_dir = out;
  if (seed) cfg.seed = *seed;
  if (!estimators.empty()) cfg.estimators = fwbnn::parse_estimators(estimators);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Finite-width corrections for Bayesian linear-readout networks"};
  app.require_subcommand(1);

  std::string config_path, out_dir, estimators;
  std::optional<std::uint64_t> seed;

  auto* run = app.add_subcommand("run", "run the experiment and write report.json, scatter.csv, scaling.csv");
  run->add_option("config", config_path, "config file")->required();
  run->add_option("--out", out_dir, "output directory (overrides output_dir)");
  run->add_option("--seed", seed, "seed (overrides the config)");
  run->add_option("--estimators", estimators, "comma-separated subset of theory,importance,langevin");

  auto* validate = app.add_subcommand("validate", "parse the config and check shapes without running");
  validate->add_option("config", config_path, "config file")->required();
  validate->add_option("--out", out_dir, "output directory");
  validate->add_option("--seed", seed, "seed");
  validate->add_option("--estimators", estimators, "estimators");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fwbnn::kExitConfigError;
  }

  fwbnn::ExperimentConfig cfg;
  try {
    cfg = load(config_path, out_dir, seed, estimators);
    if (validate->parsed()) {
      fwbnn::validate_experiment(cfg);
      std::cout << "config ok: " << cfg.sweep.widths.size() << " widths, depth " << cfg.architecture.depth << '\n';
      return fwbnn::kExitSuccess;
    }
  } catch (const fwbnn::Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return fwbnn::kExitConfigError;
  }

  try {
    const fwbnn::CorrectionReport rep = fwbnn::run_experiment(cfg, &std::cout);
    for (const fwbnn::FitRecord& f : rep.fits) {
      std::cout << "fit " << fwbnn::to_string(f.estimator) << " layer " << f.layer << ": ";
      if (f.ok)
        std::cout << "slope " << f.fit.slope << " [" << f.fit.ci_low << ", " << f.fit.ci_high << "]\n";
      else
        std::cout << "n/a (" << f.error << ")\n";
    }
    for (const fwbnn::CheckRecord& c : rep.checks)
      std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
    std::cout << "wrote " << cfg.output_dir << "/report.json\n";
    return rep.exit_code;
  } catch (const fwbnn::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (e.kind() == fwbnn::ErrorKind::Divergence) return fwbnn::kExitDivergence;
    if (e.kind() == fwbnn::ErrorKind::ConfigError || e.kind() == fwbnn::ErrorKind::InvalidArgument ||
        e.kind() == fwbnn::ErrorKind::FormatError || e.kind() == fwbnn::ErrorKind::ResourceLimit)
      return fwbnn::kExitConfigError;
    return 1;
  }
}
