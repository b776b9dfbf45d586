#include "fwbnn/experiment.hpp"

#include "fwbnn/corrections.hpp"
#include "fwbnn/gpkernels.hpp"
#include "fwbnn/importance.hpp"
#include "fwbnn/priorcumulants.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <locale>
#include <set>
#include <sstream>

namespace fwbnn {

namespace {

[[noreturn]] void config_fail(const std::string& message) { fail(ErrorKind::ConfigError, message); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ',' || c == ' ' || c == '\t') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- config file

ConfigFile ConfigFile::parse(std::istream& in, const std::string& name) {
  ConfigFile cfg;
  cfg.name = name;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = name + ":" + std::to_string(number);
    if (eq == std::string::npos) config_fail(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) config_fail(where + ": empty key");
    if (cfg.values.count(key)) config_fail(where + ": duplicate key '" + key + "'");
    cfg.values[key] = value;
    cfg.lines[key] = number;
  }
  return cfg;
}

ConfigFile ConfigFile::parse_string(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

ConfigFile ConfigFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) config_fail("cannot open config " + path);
  return parse(in, path);
}

std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::Theory: return "theory";
    case Estimator::Importance: return "importance";
    case Estimator::Langevin: return "langevin";
  }
  return "?";
}

std::vector<Estimator> parse_estimators(const std::string& text) {
  std::vector<Estimator> out;
  for (const std::string& tok : split_list(text)) {
    Estimator e;
    if (tok == "theory") e = Estimator::Theory;
    else if (tok == "importance") e = Estimator::Importance;
    else if (tok == "langevin") e = Estimator::Langevin;
    else config_fail("unknown estimator '" + tok + "'");
    if (std::find(out.begin(), out.end(), e) == out.end()) out.push_back(e);
  }
  if (out.empty()) config_fail("estimators: at least one estimator is required");
  return out;
}

// ---------------------------------------------------------------- typed config

namespace {

class Reader {
 public:
  explicit Reader(const ConfigFile& f) : file_(f) {}

  const std::string* raw(const std::string& key) {
    used_.insert(key);
    auto it = file_.values.find(key);
    return it == file_.values.end() ? nullptr : &it->second;
  }

  void str(const std::string& key, std::string& out) {
    if (auto v = raw(key)) out = *v;
  }

  template <class T>
  void integer(const std::string& key, T& out) {
    if (auto v = raw(key)) out = parse_int<T>(key, *v);
  }

  void real(const std::string& key, double& out) {
    if (auto v = raw(key)) out = parse_real(key, *v);
  }

  void opt_real(const std::string& key, std::optional<double>& out) {
    if (auto v = raw(key)) out = parse_real(key, *v);
  }

  void reals(const std::string& key, std::vector<double>& out) {
    if (auto v = raw(key)) {
      out.clear();
      for (const std::string& t : split_list(*v)) out.push_back(parse_real(key, t));
    }
  }

  template <class T>
  void integers(const std::string& key, std::vector<T>& out) {
    if (auto v = raw(key)) {
      out.clear();
      for (const std::string& t : split_list(*v)) out.push_back(parse_int<T>(key, t));
    }
  }

  void estimator(const std::string& key, Estimator& out) {
    if (auto v = raw(key)) {
      const auto list = parse_estimators(*v);
      if (list.size() != 1) config_fail(key + ": expected a single estimator");
      out = list[0];
    }
  }

  void finish() const {
    for (const auto& [key, value] : file_.values) {
      if (!used_.count(key)) {
        config_fail(file_.name + ":" + std::to_string(file_.lines.at(key)) + ": unknown key '" + key + "'");
      }
    }
  }

 private:
  template <class T>
  T parse_int(const std::string& key, const std::string& v) {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) config_fail(key + ": expected an integer, got '" + v + "'");
    return out;
  }

  double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) config_fail(key + ": expected a number, got '" + v + "'");
    return out;
  }

  const ConfigFile& file_;
  std::set<std::string> used_;
};

}  // namespace

ExperimentConfig ExperimentConfig::from(const ConfigFile& file) {
  ExperimentConfig c;
  c.source = file;
  Reader r(file);
  TaskConfig& t = c.task;
  r.str("task.source", t.source);
  r.integer("task.p", t.p);
  r.integer("task.n0", t.n0);
  r.integer("task.nd", t.nd);
  if (auto v = r.raw("task.teacher")) {
    try {
      t.teacher = parse_teacher(*v);
    } catch (const Error& e) {
      config_fail(std::string("task.teacher: ") + e.what());
    }
  }
  r.reals("task.gyy", t.gyy);
  r.integer("task.seed", t.seed);
  r.str("task.idx_images", t.idx_images);
  r.str("task.idx_labels", t.idx_labels);
  r.integer("task.side", t.side);

  ArchitectureConfig& a = c.architecture;
  if (auto v = r.raw("architecture.kind")) {
    try {
      a.kind = parse_architecture(*v);
    } catch (const Error& e) {
      config_fail(std::string("architecture.kind: ") + e.what());
    }
  }
  r.integer("architecture.depth", a.depth);
  r.str("architecture.activation", a.activation);
  r.integers("architecture.shape", a.shape);
  r.integer("architecture.filter_halfwidth", a.filter_halfwidth);
  r.str("architecture.padding", a.padding);
  r.str("architecture.readout", a.readout);

  r.real("temperature.beta", c.temperature.beta);
  r.reals("temperature.sigma2", c.temperature.sigma2);
  r.opt_real("temperature.omega", c.temperature.omega);

  r.integers("sweep.widths", c.sweep.widths);
  if (auto v = r.raw("sweep.pattern")) c.sweep.pattern = split_list(*v);

  if (auto v = r.raw("estimators")) c.estimators = parse_estimators(*v);
  r.integer("importance.draws", c.importance.draws);
  r.integer("importance.block", c.importance.block);

  r.real("schedule.dt", c.schedule.dt);
  r.integer("schedule.burn_in", c.schedule.burn_in);
  r.integer("schedule.sample_steps", c.schedule.sample_steps);
  r.integer("schedule.thinning", c.schedule.thinning);
  r.integer("schedule.chains", c.schedule.chains);

  r.str("output_dir", c.output_dir);
  r.integer("seed", c.seed);

  CheckConfig& k = c.check;
  r.opt_real("check.slope_target", k.slope_target);
  r.real("check.slope_tolerance", k.slope_tolerance);
  r.estimator("check.slope_estimator", k.slope_estimator);
  r.integer("check.slope_layer", k.slope_layer);
  r.opt_real("check.ratio_min", k.ratio_min);
  r.opt_real("check.ratio_max", k.ratio_max);
  r.estimator("check.ratio_estimator", k.ratio_estimator);
  r.integer("check.ratio_width", k.ratio_width);
  r.integer("check.ratio_layer", k.ratio_layer);
  r.opt_real("check.null_sigmas", k.null_sigmas);
  r.estimator("check.null_estimator", k.null_estimator);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) { return from(ConfigFile::load(path)); }

bool ExperimentConfig::wants(Estimator e) const {
  return std::find(estimators.begin(), estimators.end(), e) != estimators.end();
}

void ExperimentConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) config_fail(msg);
  };
  need(task.source == "synthetic" || task.source == "idx", "task.source must be 'synthetic' or 'idx'");
  need(task.p >= 1 && task.n0 >= 1 && task.nd >= 1, "task.p, task.n0 and task.nd must be >= 1");
  if (task.source == "idx") {
    need(!task.idx_images.empty() && !task.idx_labels.empty(), "task.idx_images and task.idx_labels are required");
    need(task.nd == 10, "task.nd must be 10 for idx tasks (one-hot digits)");
    need(task.side >= 1, "task.side must be >= 1");
  }
  if (task.teacher == TeacherKind::PrescribedGyy && task.source == "synthetic") {
    need(task.gyy.size() == static_cast<std::size_t>(task.p) * task.p, "task.gyy must hold p*p entries");
  }
  need(architecture.depth >= 2, "architecture.depth must be >= 2");
  need(architecture.padding == "circular", "architecture.padding: only circular padding is supported");
  const bool cnn = architecture.kind == Architecture::CnnLinear1d || architecture.kind == Architecture::CnnLinear2d;
  if (cnn) {
    const std::size_t q = architecture.kind == Architecture::CnnLinear1d ? 1 : 2;
    need(architecture.shape.size() == q, "architecture.shape must have " + std::to_string(q) + " extents");
    need(architecture.filter_halfwidth >= 0, "architecture.filter_halfwidth must be >= 0");
    const std::string& ro = architecture.readout;
    need(ro == "vectorization" || ro == "gap" || ro.rfind("pixel:", 0) == 0,
         "architecture.readout must be vectorization, gap or pixel:<site>");
    if (task.source == "idx") {
      need(architecture.kind == Architecture::CnnLinear2d && architecture.shape[0] == task.side &&
               architecture.shape[1] == task.side,
           "idx tasks with CNNs need a 2D shape equal to task.side x task.side");
    }
  }
  if (architecture.kind == Architecture::SingleNonlinear) need(architecture.depth == 2, "single-nonlinear needs depth 2");
  try {
    (void)parse_activation(architecture.activation);
  } catch (const Error& e) {
    config_fail(std::string("architecture.activation: ") + e.what());
  }
  need(temperature.beta >= 0.0, "temperature.beta must be >= 0");
  need(temperature.sigma2.size() == 1 || static_cast<int>(temperature.sigma2.size()) == architecture.depth,
       "temperature.sigma2 needs one value or one per layer");
  for (double s : temperature.sigma2) need(s > 0.0 && std::isfinite(s), "temperature.sigma2 must be positive");
  need(!sweep.widths.empty(), "sweep.widths must be nonempty");
  for (long w : sweep.widths) need(w >= 1, "sweep.widths must be >= 1");
  if (!sweep.pattern.empty()) {
    need(static_cast<int>(sweep.pattern.size()) == architecture.depth - 1,
         "sweep.pattern needs one entry per hidden layer");
    for (const std::string& tok : sweep.pattern) {
      if (tok == "n") continue;
      long v = 0;
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      need(ec == std::errc() && ptr == tok.data() + tok.size() && v >= 1,
           "sweep.pattern entries must be 'n' or a positive width");
    }
  }
  need(!estimators.empty(), "estimators: at least one estimator is required");
  need(importance.draws >= 1 && importance.block >= 1, "importance.draws and importance.block must be >= 1");
  if (wants(Estimator::Langevin)) {
    LangevinSchedule s = schedule;
    if (temperature.omega) s.omega = *temperature.omega;
    try {
      s.validate();
    } catch (const Error& e) {
      config_fail(std::string("schedule: ") + e.what());
    }
  }
  need(check.slope_tolerance >= 0.0, "check.slope_tolerance must be >= 0");
  need(check.slope_layer >= 0 && check.slope_layer < architecture.depth, "check.slope_layer out of range");
  need(check.ratio_layer >= 0 && check.ratio_layer < architecture.depth, "check.ratio_layer out of range");
  auto want_check = [&](Estimator e, const char* what) {
    need(wants(e), std::string(what) + ": estimator '" + to_string(e) + "' is not enabled");
  };
  if (check.slope_target) want_check(check.slope_estimator, "check.slope_estimator");
  if (check.ratio_min || check.ratio_max) {
    need(check.ratio_estimator != Estimator::Theory, "check.ratio_estimator must be empirical");
    want_check(check.ratio_estimator, "check.ratio_estimator");
    want_check(Estimator::Theory, "check.ratio_min");
    if (check.ratio_width)
      need(std::find(sweep.widths.begin(), sweep.widths.end(), check.ratio_width) != sweep.widths.end(),
           "check.ratio_width is not in sweep.widths");
  }
  if (check.null_sigmas) {
    need(check.null_estimator != Estimator::Theory, "check.null_estimator must be empirical");
    want_check(check.null_estimator, "check.null_estimator");
  }
}

WidthProfile ExperimentConfig::profile(long width) const {
  WidthProfile pr;
  const int d = architecture.depth;
  for (int l = 1; l < d; ++l) {
    const std::string tok = sweep.pattern.empty() ? "n" : sweep.pattern[l - 1];
    pr.hidden.push_back(tok == "n" ? width : std::stol(tok));
  }
  pr.output = task.nd;
  pr.variances = temperature.sigma2.size() == 1 ? std::vector<double>(d, temperature.sigma2[0]) : temperature.sigma2;
  return pr;
}

NetworkConfig ExperimentConfig::network(long width) const {
  NetworkConfig n;
  n.arch = architecture.kind;
  n.profile = profile(width);
  n.activation = parse_activation(architecture.activation);
  if (n.is_cnn()) {
    n.shape.extents = architecture.shape;
    n.filters.assign(architecture.depth - 1,
                     FilterSpec::uniform(static_cast<int>(architecture.shape.size()), architecture.filter_halfwidth));
    const std::string& ro = architecture.readout;
    if (ro == "gap") n.readout = Readout::global_average(n.shape.sites());
    else if (ro.rfind("pixel:", 0) == 0) n.readout = Readout::single_pixel(n.shape.sites(), std::stoi(ro.substr(6)));
    else n.readout = Readout::vectorization();
    n.input_dim = task.source == "idx" ? 1 : task.n0;
  } else {
    n.input_dim = task.source == "idx" ? task.side * task.side : task.n0;
  }
  return n;
}

Task make_task(const ExperimentConfig& config) {
  const TaskConfig& t = config.task;
  if (t.source == "idx") {
    const IdxTensor images = load_idx(t.idx_images, kIdxImagesMagic);
    const IdxTensor labels = load_idx(t.idx_labels, kIdxLabelsMagic);
    return build_task(images, labels, t.p, TaskOrdering::ClassSorted, t.side);
  }
  const NetworkConfig net = config.network(config.sweep.widths.front());
  Teacher teacher;
  teacher.kind = t.teacher;
  if (t.teacher == TeacherKind::PrescribedGyy) {
    teacher.gyy = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        t.gyy.data(), t.p, t.p);
  }
  return synthetic_task(t.seed, net.input_width(), t.p, t.nd, teacher);
}

// ---------------------------------------------------------------- power law

PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points) {
  require(points.size() >= 3, "fit_power_law: need at least 3 points");
  const int n = static_cast<int>(points.size());
  Vec x(n), y(n);
  for (int i = 0; i < n; ++i) {
    require(points[i].first > 0.0 && points[i].second > 0.0, "fit_power_law: widths and values must be positive");
    x(i) = std::log(points[i].first);
    y(i) = std::log(points[i].second);
  }
  const double mx = x.mean(), my = y.mean();
  const double sxx = (x.array() - mx).square().sum();
  require(sxx > 0.0, "fit_power_law: need at least two distinct widths");
  const double sxy = ((x.array() - mx) * (y.array() - my)).sum();
  PowerLawFit f;
  f.points = n;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.residual = (y.array() - f.intercept - f.slope * x.array()).square().sum();
  f.slope_se = std::sqrt(f.residual / (n - 2) / sxx);
  const boost::math::students_t dist(n - 2);
  const double q = boost::math::quantile(boost::math::complement(dist, 0.025));
  f.ci_low = f.slope - q * f.slope_se;
  f.ci_high = f.slope + q * f.slope_se;
  return f;
}

// ---------------------------------------------------------------- run

const EstimateCell* ReportCell::estimate(Estimator e) const {
  if (e == Estimator::Importance && importance) return &*importance;
  if (e == Estimator::Langevin && langevin) return &*langevin;
  return nullptr;
}

namespace {

std::uint64_t cell_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1) + salt;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

struct Theory {
  std::vector<Mat> k_inf;
  std::vector<Mat> delta;
  std::vector<std::string> error;  // empty when delta is available
};

Theory compute_theory(const ExperimentConfig& cfg, const NetworkConfig& net, const Task& task, bool want_delta) {
  const int d = net.profile.depth();
  Theory th;
  th.k_inf.resize(d - 1);
  th.delta.resize(d - 1);
  th.error.assign(d - 1, want_delta ? "" : "theory not requested");
  const TemperatureParams temp = TemperatureParams::from(cfg.temperature.beta, net.profile);
  const Mat& gxx = task.gxx;
  const Mat& gyy = task.gyy;
  auto guarded = [&](int l, auto&& fn) {
    if (!want_delta) return;
    try {
      fn();
    } catch (const Error& e) {
      th.error[l - 1] = e.what();
    }
  };
  switch (net.arch) {
    case Architecture::MlpLinear:
      for (int l = 1; l < d; ++l) {
        th.k_inf[l - 1] = mlp_linear_gp(gxx, net.profile, l);
        guarded(l, [&] { th.delta[l - 1] = deep_linear_delta(gxx, gyy, net.profile, temp, l); });
      }
      break;
    case Architecture::CnnLinear1d:
    case Architecture::CnnLinear2d: {
      const FourIndexKernel base = cnn_input_gram(task.data.x, net.input_dim, net.shape);
      for (int l = 1; l < d; ++l) {
        th.k_inf[l - 1] = cnn_linear_gp(base, net.filters, net.profile, l).flat;
        guarded(l, [&] {
          th.delta[l - 1] = cnn_correction_delta(base, gyy, net.filters, net.profile, temp, l, net.readout).flat;
        });
      }
      break;
    }
    case Architecture::MlpRelu:
    case Architecture::SingleNonlinear: {
      const ActivationSpec act = net.hidden_activation();
      const std::vector<Mat> ks = deep_nonlinear_gp(gxx, net.profile, act);
      for (int l = 1; l < d; ++l) th.k_inf[l - 1] = ks[l - 1];
      if (d == 2) {
        guarded(1, [&] {
          const NonlinearCorrection c = single_nonlinear_correction(gxx, gyy, net.profile.variance(1), act, temp,
                                                                    net.profile.width(1), net.profile.output);
          th.delta[0] = c.delta;
        });
      } else if (want_delta) {
        for (int l = 1; l < d; ++l) th.error[l - 1] = "no closed-form correction for deep nonlinear networks";
      }
      break;
    }
  }
  return th;
}

double frob(const Mat& m) { return m.norm(); }

void fill_estimate(EstimateCell& c, const Mat& k_inf, const Theory& th, int l) {
  c.deviation = c.mean - k_inf;
  c.deviation_norm = frob(c.deviation);
  c.deviation_se =
      c.deviation_norm > 0.0 ? (c.deviation.array() * c.se.array()).matrix().norm() / c.deviation_norm : c.se.norm();
  if (th.error[l - 1].empty()) {
    const double dn = frob(th.delta[l - 1]);
    c.relative_error = dn > 0.0 ? frob(c.deviation - th.delta[l - 1]) / dn : std::numeric_limits<double>::quiet_NaN();
    c.ratio = c.deviation_norm > 0.0 ? dn / c.deviation_norm : std::numeric_limits<double>::quiet_NaN();
  } else {
    c.relative_error = c.ratio = std::numeric_limits<double>::quiet_NaN();
  }
  double sum = 0.0;
  long m = 0;
  for (Eigen::Index j = 0; j < c.deviation.cols(); ++j)
    for (Eigen::Index i = 0; i <= j; ++i)
      if (c.se(i, j) > 0.0) {
        const double z = c.deviation(i, j) / c.se(i, j);
        sum += z * z;
        ++m;
      }
  c.null_statistic = m ? std::sqrt(sum / m) : 0.0;
}

nlohmann::json to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json to_json(const EstimateCell& c) {
  nlohmann::json j;
  j["ok"] = c.ok;
  if (!c.ok) {
    j["error"] = c.error;
    return j;
  }
  j["deviation_norm"] = c.deviation_norm;
  j["deviation_norm_se"] = c.deviation_se;
  j["relative_error_vs_theory"] = c.relative_error;
  j["theory_over_empirical"] = c.ratio;
  j["null_statistic"] = c.null_statistic;
  j["effective_samples"] = c.ess;
  j["draws"] = c.draws;
  j["seconds"] = c.seconds;
  j["mean"] = to_json(c.mean);
  j["se"] = to_json(c.se);
  return j;
}

std::string num9(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(9) << v;
  return os.str();
}

void run_checks(const ExperimentConfig& cfg, CorrectionReport& rep) {
  const CheckConfig& k = cfg.check;
  const int d = cfg.architecture.depth;
  auto layers = [&](int chosen) {
    std::vector<int> out;
    for (int l = 1; l < d; ++l)
      if (chosen == 0 || chosen == l) out.push_back(l);
    return out;
  };
  if (k.slope_target) {
    for (int l : layers(k.slope_layer)) {
      CheckRecord c;
      c.name = "slope[" + to_string(k.slope_estimator) + ",layer=" + std::to_string(l) + "]";
      for (const FitRecord& f : rep.fits) {
        if (f.estimator != k.slope_estimator || f.layer != l) continue;
        if (!f.ok) {
          c.detail = "fit unavailable: " + f.error;
        } else {
          c.passed = std::abs(f.fit.slope - *k.slope_target) <= k.slope_tolerance;
          c.detail = "slope " + num9(f.fit.slope) + ", target " + num9(*k.slope_target) + " +- " +
                     num9(k.slope_tolerance);
        }
      }
      if (c.detail.empty()) c.detail = "no fit";
      rep.checks.push_back(c);
    }
  }
  if (k.ratio_min || k.ratio_max) {
    const long width = k.ratio_width ? k.ratio_width : *std::max_element(cfg.sweep.widths.begin(), cfg.sweep.widths.end());
    const double lo = k.ratio_min.value_or(0.0);
    const double hi = k.ratio_max.value_or(std::numeric_limits<double>::infinity());
    for (int l : layers(k.ratio_layer)) {
      CheckRecord c;
      c.name = "ratio[" + to_string(k.ratio_estimator) + ",width=" + std::to_string(width) + ",layer=" + std::to_string(l) + "]";
      c.detail = "cell missing";
      for (const ReportCell& cell : rep.cells) {
        if (cell.width != width || cell.layer != l) continue;
        const EstimateCell* e = cell.estimate(k.ratio_estimator);
        if (!cell.theory_ok) c.detail = "theory unavailable: " + cell.theory_error;
        else if (!e || !e->ok) c.detail = "estimate unavailable" + (e ? ": " + e->error : std::string());
        else {
          c.passed = e->ratio >= lo && e->ratio <= hi;
          c.detail = "ratio " + num9(e->ratio) + " in [" + num9(lo) + ", " + num9(hi) + "]";
        }
      }
      rep.checks.push_back(c);
    }
  }
  if (k.null_sigmas) {
    for (const ReportCell& cell : rep.cells) {
      CheckRecord c;
      c.name = "null[" + to_string(k.null_estimator) + ",width=" + std::to_string(cell.width) +
               ",layer=" + std::to_string(cell.layer) + "]";
      const EstimateCell* e = cell.estimate(k.null_estimator);
      if (!e || !e->ok) {
        c.detail = "estimate unavailable" + (e ? ": " + e->error : std::string());
      } else {
        const double m = static_cast<double>(e->deviation.rows() * (e->deviation.rows() + 1) / 2);
        const double bound = std::sqrt(1.0 + *k.null_sigmas * std::sqrt(2.0 / m));
        c.passed = e->null_statistic <= bound;
        c.detail = "rms z " + num9(e->null_statistic) + " <= " + num9(bound);
      }
      rep.checks.push_back(c);
    }
  }
}

void write_outputs(const ExperimentConfig& cfg, const CorrectionReport& rep) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  const fs::path dir(cfg.output_dir);

  nlohmann::json j;
  nlohmann::json config = nlohmann::json::object();
  for (const auto& [key, value] : cfg.source.values) config[key] = value;
  j["config"] = config;
  nlohmann::json est = nlohmann::json::array();
  for (Estimator e : cfg.estimators) est.push_back(to_string(e));
  j["metadata"] = {{"estimators", est},
                   {"seed", cfg.seed},
                   {"deviation", "Frobenius norm of <K> - K_inf per hidden layer"},
                   {"uncertainty", "standard errors from multiple chains / batched importance weights, "
                                   "not a single trained instance"}};
  nlohmann::json cells = nlohmann::json::array();
  for (const ReportCell& c : rep.cells) {
    nlohmann::json cj;
    cj["width"] = c.width;
    cj["layer"] = c.layer;
    cj["k_inf_norm"] = c.k_inf_norm;
    cj["k_inf"] = to_json(c.k_inf);
    nlohmann::json th;
    th["ok"] = c.theory_ok;
    if (c.theory_ok) {
      th["delta_norm"] = c.delta_norm;
      th["delta"] = to_json(c.delta);
    } else {
      th["error"] = c.theory_error;
    }
    cj["theory"] = th;
    if (c.importance) cj["importance"] = to_json(*c.importance);
    if (c.langevin) cj["langevin"] = to_json(*c.langevin);
    cells.push_back(std::move(cj));
  }
  j["cells"] = cells;
  nlohmann::json fits = nlohmann::json::array();
  for (const FitRecord& f : rep.fits) {
    nlohmann::json fj = {{"estimator", to_string(f.estimator)}, {"layer", f.layer}, {"ok", f.ok}};
    if (f.ok) {
      fj["slope"] = f.fit.slope;
      fj["intercept"] = f.fit.intercept;
      fj["slope_se"] = f.fit.slope_se;
      fj["ci95"] = {f.fit.ci_low, f.fit.ci_high};
      fj["points"] = f.fit.points;
    } else {
      fj["error"] = f.error;
    }
    fits.push_back(std::move(fj));
  }
  j["fits"] = fits;
  nlohmann::json checks = nlohmann::json::array();
  for (const CheckRecord& c : rep.checks) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  j["checks"] = checks;
  j["diverged"] = rep.diverged;
  j["exit_code"] = rep.exit_code;
  {
    std::ofstream out(dir / "report.json");
    if (!out) fail(ErrorKind::InvalidArgument, "cannot write " + (dir / "report.json").string());
    out << j.dump(2) << '\n';
  }

  {
    std::ofstream out(dir / "scatter.csv");
    out.imbue(std::locale::classic());
    out << "width,layer,row,col,estimator,theory,empirical,se\n";
    for (const ReportCell& c : rep.cells) {
      if (!c.theory_ok) continue;
      for (Estimator e : {Estimator::Importance, Estimator::Langevin}) {
        const EstimateCell* ec = c.estimate(e);
        if (!ec || !ec->ok) continue;
        for (Eigen::Index i = 0; i < c.delta.rows(); ++i)
          for (Eigen::Index k = i; k < c.delta.cols(); ++k)
            out << c.width << ',' << c.layer << ',' << i << ',' << k << ',' << to_string(e) << ','
                << num9(c.delta(i, k)) << ',' << num9(ec->deviation(i, k)) << ',' << num9(ec->se(i, k)) << '\n';
      }
    }
  }

  {
    std::ofstream out(dir / "scaling.csv");
    out.imbue(std::locale::classic());
    out << "width,layer,k_inf_norm,theory_norm,importance_norm,importance_se,langevin_norm,langevin_se\n";
    auto field = [](bool ok, double v) { return ok ? num9(v) : std::string("nan"); };
    for (const ReportCell& c : rep.cells) {
      const EstimateCell* im = c.estimate(Estimator::Importance);
      const EstimateCell* lg = c.estimate(Estimator::Langevin);
      const bool iok = im && im->ok, lok = lg && lg->ok;
      out << c.width << ',' << c.layer << ',' << num9(c.k_inf_norm) << ',' << field(c.theory_ok, c.delta_norm) << ','
          << field(iok, iok ? im->deviation_norm : 0.0) << ',' << field(iok, iok ? im->deviation_se : 0.0) << ','
          << field(lok, lok ? lg->deviation_norm : 0.0) << ',' << field(lok, lok ? lg->deviation_se : 0.0) << '\n';
    }
  }
}

}  // namespace

void validate_experiment(const ExperimentConfig& config) {
  config.validate();
  const Task task = make_task(config);
  for (long w : config.sweep.widths) {
    const NetworkConfig net = config.network(w);
    try {
      net.validate();
    } catch (const Error& e) {
      config_fail("width " + std::to_string(w) + ": " + e.what());
    }
    if (task.data.x.cols() != net.input_width())
      config_fail("input width " + std::to_string(task.data.x.cols()) + " does not match the architecture (" +
                  std::to_string(net.input_width()) + ")");
    if (net.is_cnn() && config.wants(Estimator::Theory) &&
        static_cast<long>(task.data.x.rows()) * net.sites() > kDefaultCnnCovarianceCap)
      fail(ErrorKind::ResourceLimit, "p*s exceeds the CNN covariance cap of " + std::to_string(kDefaultCnnCovarianceCap));
  }
  if (config.wants(Estimator::Importance) && !std::isfinite(config.temperature.beta))
    config_fail("the importance estimator needs a finite temperature.beta");
}

CorrectionReport run_experiment(const ExperimentConfig& config, std::ostream* log) {
  validate_experiment(config);
  const Task task = make_task(config);
  const int d = config.architecture.depth;
  CorrectionReport rep;
  for (std::size_t wi = 0; wi < config.sweep.widths.size(); ++wi) {
    const long width = config.sweep.widths[wi];
    const NetworkConfig net = config.network(width);
    const Theory th = compute_theory(config, net, task, config.wants(Estimator::Theory));

    std::optional<ImportanceKernels> imp;
    std::string imp_error;
    double imp_seconds = 0.0;
    if (config.wants(Estimator::Importance)) {
      ImportanceOptions opt;
      opt.draws = config.importance.draws;
      opt.block = config.importance.block;
      opt.seed = cell_seed(config.seed, wi, 1);
      try {
        imp = importance_oracle(net, task.data, config.temperature.beta, opt);
        imp_seconds = imp->raw.seconds;
        if (!imp->raw.reliable) warn("importance: " + imp->raw.warning);
      } catch (const Error& e) {
        imp_error = e.what();
      }
    }

    std::optional<KernelEstimate> lang;
    std::string lang_error;
    if (config.wants(Estimator::Langevin)) {
      LangevinSchedule s = config.schedule;
      s.seed = cell_seed(config.seed, wi, 2);
      if (config.temperature.omega) s.omega = *config.temperature.omega;
      try {
        const Network network(net);
        lang = run_chains(network, task.data, config.temperature.beta, s);
      } catch (const Error& e) {
        lang_error = e.what();
        if (e.kind() == ErrorKind::Divergence) rep.diverged = true;
      }
    }

    for (int l = 1; l < d; ++l) {
      ReportCell cell;
      cell.width = width;
      cell.layer = l;
      cell.k_inf = th.k_inf[l - 1];
      cell.k_inf_norm = frob(cell.k_inf);
      cell.theory_ok = th.error[l - 1].empty();
      cell.theory_error = th.error[l - 1];
      if (cell.theory_ok) {
        cell.delta = th.delta[l - 1];
        cell.delta_norm = frob(cell.delta);
      }
      if (config.wants(Estimator::Importance)) {
        EstimateCell e;
        if (imp) {
          e.ok = true;
          e.mean = imp->mean[l - 1];
          e.se = imp->se[l - 1];
          e.ess = imp->raw.ess;
          e.draws = imp->raw.draws;
          e.seconds = imp_seconds;
          fill_estimate(e, cell.k_inf, th, l);
        } else {
          e.error = imp_error;
        }
        cell.importance = e;
      }
      if (config.wants(Estimator::Langevin)) {
        EstimateCell e;
        if (lang) {
          e.ok = true;
          e.mean = lang->mean[l - 1];
          e.se = lang->se[l - 1];
          e.ess = lang->effective_samples;
          e.draws = lang->samples;
          e.seconds = lang->seconds;
          fill_estimate(e, cell.k_inf, th, l);
        } else {
          e.error = lang_error;
        }
        cell.langevin = e;
      }
      if (log) {
        *log << "width " << width << " layer " << l << ": |K_inf| " << num9(cell.k_inf_norm);
        if (config.wants(Estimator::Theory))
          *log << ", theory " << (cell.theory_ok ? num9(cell.delta_norm) : "n/a");
        for (Estimator est : {Estimator::Importance, Estimator::Langevin}) {
          const EstimateCell* ec = cell.estimate(est);
          if (!ec) continue;
          *log << ", " << to_string(est) << " "
               << (ec->ok ? num9(ec->deviation_norm) + " +- " + num9(ec->deviation_se) : "failed (" + ec->error + ")");
        }
        *log << '\n';
      }
      rep.cells.push_back(std::move(cell));
    }
  }

  for (Estimator est : config.estimators) {
    for (int l = 1; l < d; ++l) {
      FitRecord f;
      f.estimator = est;
      f.layer = l;
      std::vector<std::pair<double, double>> pts;
      bool missing = false;
      for (const ReportCell& c : rep.cells) {
        if (c.layer != l) continue;
        if (est == Estimator::Theory) {
          if (c.theory_ok) pts.emplace_back(static_cast<double>(c.width), c.delta_norm);
          else missing = true;
        } else {
          const EstimateCell* ec = c.estimate(est);
          if (ec && ec->ok) pts.emplace_back(static_cast<double>(c.width), ec->deviation_norm);
          else missing = true;
        }
      }
      try {
        if (missing) fail(ErrorKind::InvalidArgument, "some widths have no value");
        f.fit = fit_power_law(pts);
        f.ok = true;
      } catch (const Error& e) {
        f.error = e.what();
      }
      rep.fits.push_back(f);
    }
  }

  run_checks(config, rep);
  const bool failed = std::any_of(rep.checks.begin(), rep.checks.end(), [](const CheckRecord& c) { return !c.passed; });
  rep.exit_code = rep.diverged ? kExitDivergence : failed ? kExitCheckFailed : kExitSuccess;
  write_outputs(config, rep);
  return rep;
}

}  // namespace fwbnn
