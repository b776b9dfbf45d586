#ifndef FWBNN_EXPERIMENT_HPP
#define FWBNN_EXPERIMENT_HPP

#include "fwbnn/data.hpp"
#include "fwbnn/network.hpp"
#include "fwbnn/sampler.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fwbnn {

// Flat `section.key = value` text; '#' starts a comment.
struct ConfigFile {
  std::map<std::string, std::string> values;
  std::map<std::string, int> lines;
  std::string name = "<config>";

  static ConfigFile parse(std::istream& in, const std::string& name = "<config>");
  static ConfigFile parse_string(const std::string& text);
  static ConfigFile load(const std::string& path);
  bool has(const std::string& key) const { return values.count(key) != 0; }
};

enum class Estimator { Theory, Importance, Langevin };
std::string to_string(Estimator e);
std::vector<Estimator> parse_estimators(const std::string& text);

struct TaskConfig {
  std::string source = "synthetic";  // synthetic | idx
  int p = 6;
  int n0 = 8;
  int nd = 2;
  TeacherKind teacher = TeacherKind::RandomLinear;
  std::vector<double> gyy;  // p² entries, row-major (prescribed teacher)
  std::uint64_t seed = 1;
  std::string idx_images;
  std::string idx_labels;
  int side = 10;
};

struct ArchitectureConfig {
  Architecture kind = Architecture::MlpLinear;
  int depth = 3;
  std::string activation = "identity";
  std::vector<int> shape{1};
  int filter_halfwidth = 0;
  std::string padding = "circular";
  std::string readout = "vectorization";  // vectorization | gap | pixel:<site>
};

struct TemperatureConfig {
  double beta = 1.0;
  std::vector<double> sigma2{1.0};  // one value for every layer, or one per layer
  std::optional<double> omega;
};

struct SweepConfig {
  std::vector<long> widths;
  std::vector<std::string> pattern;  // per hidden layer: "n" or a fixed width; default all "n"
};

struct ImportanceConfig {
  long draws = 100000;
  long block = 4096;
};

struct CheckConfig {
  // Fitted log-log slope of ‖deviation‖ against the sweep width.
  std::optional<double> slope_target;
  double slope_tolerance = 0.15;
  Estimator slope_estimator = Estimator::Theory;
  int slope_layer = 0;  // 0 = every layer
  // ‖Δ_theory‖ / ‖⟨K⟩_emp − K∞‖ at one width.
  std::optional<double> ratio_min;
  std::optional<double> ratio_max;
  Estimator ratio_estimator = Estimator::Importance;
  long ratio_width = 0;  // 0 = largest
  int ratio_layer = 0;
  // Empirical deviation consistent with zero (β = 0 runs).
  std::optional<double> null_sigmas;
  Estimator null_estimator = Estimator::Importance;
};

struct ExperimentConfig {
  TaskConfig task;
  ArchitectureConfig architecture;
  TemperatureConfig temperature;
  SweepConfig sweep;
  std::vector<Estimator> estimators{Estimator::Theory};
  ImportanceConfig importance;
  LangevinSchedule schedule;
  std::string output_dir = "out";
  std::uint64_t seed = 1;
  CheckConfig check;
  ConfigFile source;

  // Unknown keys and malformed values are config errors.
  static ExperimentConfig from(const ConfigFile& file);
  static ExperimentConfig load(const std::string& path);
  void validate() const;
  bool wants(Estimator e) const;
  WidthProfile profile(long width) const;
  NetworkConfig network(long width) const;
};

Task make_task(const ExperimentConfig& config);

struct PowerLawFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
  double ci_low = 0.0;   // 95%
  double ci_high = 0.0;
  double residual = 0.0;  // residual sum of squares in log space
  int points = 0;
};

// Least squares of log value on log n.
PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points);

struct EstimateCell {
  bool ok = false;
  std::string error;
  Mat mean, se;             // empirical ⟨K⟩ and SE
  Mat deviation;            // ⟨K⟩ − K∞
  double deviation_norm = 0.0;
  double deviation_se = 0.0;  // delta-method SE of the norm
  double relative_error = 0.0;  // ‖dev − Δ‖/‖Δ‖
  double ratio = 0.0;           // ‖Δ‖/‖dev‖
  double null_statistic = 0.0;  // RMS standardized deviation (upper triangle)
  double ess = 0.0;
  long draws = 0;
  double seconds = 0.0;
};

struct ReportCell {
  long width = 0;
  int layer = 0;
  Mat k_inf;
  double k_inf_norm = 0.0;
  bool theory_ok = false;
  std::string theory_error;
  Mat delta;
  double delta_norm = 0.0;
  std::optional<EstimateCell> importance;
  std::optional<EstimateCell> langevin;
  const EstimateCell* estimate(Estimator e) const;
};

struct FitRecord {
  Estimator estimator;
  int layer = 0;
  bool ok = false;
  std::string error;
  PowerLawFit fit;
};

struct CheckRecord {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct CorrectionReport {
  std::vector<ReportCell> cells;
  std::vector<FitRecord> fits;
  std::vector<CheckRecord> checks;
  bool diverged = false;
  int exit_code = 0;
};

constexpr int kExitSuccess = 0;
constexpr int kExitConfigError = 2;
constexpr int kExitCheckFailed = 3;
constexpr int kExitDivergence = 4;

// Writes report.json, scatter.csv and scaling.csv into config.output_dir.
// `log` receives one progress line per cell.
CorrectionReport run_experiment(const ExperimentConfig& config, std::ostream* log = nullptr);

// Shape checks without running any estimator.
void validate_experiment(const ExperimentConfig& config);

}  // namespace fwbnn

#endif
