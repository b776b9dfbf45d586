// Acceptance runs AC1..AC10. One PASS/FAIL line per criterion; exit status is the
// number of failed criteria. `acceptance AC3 AC7` runs a subset (AC3 reuses AC2's run).
#include "fwbnn/corrections.hpp"
#include "fwbnn/data.hpp"
#include "fwbnn/experiment.hpp"
#include "fwbnn/importance.hpp"
#include "fwbnn/predictor.hpp"
#include "fwbnn/priorcumulants.hpp"
#include "fwbnn/sampler.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace fwbnn;

namespace {

// Pinned tolerances.
constexpr double kZ = 3.0;                 // per-entry SE multiple
constexpr double kAc1SlopeTol = 0.3;       // residual slope −2 ± 0.3
constexpr double kAc2RelTol = 0.15;        // ‖oracle dev − Δ‖/‖Δ‖ at n = 512
constexpr double kAc2SlopeTol = 0.15;      // deviation slope −1 ± 0.15
constexpr double kAc3RatioTol = 0.15;      // oracle layer ratio 2 ± 15%
constexpr double kAc4Factor = 2.0;         // t³ scaling within a factor 2
constexpr double kAc4LowTemp = 1e-4;       // β=1e6 vs β=∞, relative to the correction
constexpr double kAc5Exact = 1e-12;
constexpr double kAc5RelTol = 0.20;
constexpr double kAc6Paths = 1e-9;
constexpr double kAc6Locality = 1e-12;
constexpr double kAc7Limit = 1e-4;
constexpr double kAc7RelTol = 0.15;
constexpr double kAc8Residual = 1e-10;
constexpr double kAc8Root = 1e-12;
constexpr double kAc8QuarterTol = 0.5;     // ratio 4 ± 0.5
constexpr double kAc8HalfTol = 0.2;        // ratio 2 ± 0.2
constexpr double kAc9Grad = 1e-5;
constexpr double kAc10FirstTol = 0.3;
constexpr double kAc10FlatSlope = -0.3;
constexpr double kAc10Minutes = 30.0;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    detail << (detail.tellp() > 0 ? "; " : "") << what << (ok ? "" : " [x]");
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

Mat gram(const Mat& x) { return x * x.transpose() / static_cast<double>(x.cols()); }

double rel(const Mat& a, const Mat& b) { return (a - b).norm() / b.norm(); }

// Largest |a − b|/se over the upper triangle of a symmetric matrix.
double max_z_sym(const Mat& a, const Mat& b, const Mat& se) {
  double z = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = i; j < a.cols(); ++j) z = std::max(z, std::abs(a(i, j) - b(i, j)) / se(i, j));
  return z;
}

// Same on a four-index tensor, over the unique (μ≤ν, ρ≤λ, pair ≤ pair) entries.
double max_z_tensor(const Mat& a, const Mat& b, const Mat& se, int p) {
  double z = 0.0;
  for (int mu = 0; mu < p; ++mu)
    for (int nu = mu; nu < p; ++nu)
      for (int rho = 0; rho < p; ++rho)
        for (int lam = rho; lam < p; ++lam) {
          const int r = mu * p + nu, c = rho * p + lam;
          if (c < r) continue;
          z = std::max(z, std::abs(a(r, c) - b(r, c)) / se(r, c));
        }
  return z;
}

double slope(const std::vector<std::pair<double, double>>& pts) { return fit_power_law(pts).slope; }

NetworkConfig linear_mlp(int n0, std::vector<long> hidden, long nd) {
  NetworkConfig c;
  c.arch = Architecture::MlpLinear;
  c.input_dim = n0;
  c.profile.hidden = std::move(hidden);
  c.profile.output = nd;
  c.profile.variances.assign(c.profile.hidden.size() + 1, 1.0);
  return c;
}

// ---------------------------------------------------------------- AC1

Outcome ac1() {
  Outcome o;
  const Mat x = synthetic_task(101, 6, 4, 1).data.x;
  const Mat g = gram(x);
  NetworkConfig c = linear_mlp(6, {800, 800}, 1);
  OracleOptions opt;
  opt.seed = 11;
  const PriorCumulants pc = prior_cumulant_oracle(c, x, 100000, opt);
  double zm = 0.0, zc = 0.0;
  for (int l = 1; l <= 2; ++l) {
    zm = std::max(zm, max_z_sym(pc.mean[l - 1], c.profile.m2(l) * g, pc.mean_se[l - 1]));
    zc = std::max(zc, max_z_tensor(pc.layer_covariance(l, l), mlp_kernel_covariance(g, c.profile, l),
                                   pc.layer_covariance_se(l, l), 4));
  }
  o.require(zm <= kZ, "mean max z " + fmt(zm));
  o.require(zc <= kZ, "covariance max z " + fmt(zc));
  // O(n⁻²) residual of the leading form, from the exact recursion.
  for (int l = 1; l <= 2; ++l) {
    std::vector<std::pair<double, double>> pts;
    for (long n : {800L, 1600L, 3200L}) {
      const WidthProfile prof = WidthProfile::uniform(3, n, 1);
      pts.emplace_back(n, (mlp_kernel_covariance_exact(g, prof, l) - mlp_kernel_covariance(g, prof, l)).norm());
    }
    if (l == 1) {
      // A single Wishart layer has no higher-order term.
      const double r = pts.front().second / mlp_kernel_covariance(g, WidthProfile::uniform(3, 800, 1), 1).norm();
      o.require(r <= 1e-12, "layer 1 leading form exact " + fmt(r));
    } else {
      const double s = slope(pts);
      o.require(std::abs(s + 2.0) <= kAc1SlopeTol, "layer 2 residual slope " + fmt(s));
    }
  }
  return o;
}

// ---------------------------------------------------------------- AC2 / AC3

struct Ac2Run {
  std::vector<long> widths{64, 128, 256, 512};
  std::vector<Mat> theory[2], oracle[2], oracle_se[2];
  bool done = false;
};

Ac2Run& ac2_run() {
  static Ac2Run run;
  if (run.done) return run;
  const Task t = synthetic_task(202, 8, 6, 2);
  for (long n : run.widths) {
    const NetworkConfig c = linear_mlp(8, {n, n}, 2);
    ImportanceOptions opt;
    opt.draws = 1000000;
    opt.seed = 7 + static_cast<std::uint64_t>(n);
    const ImportanceKernels r = importance_oracle(c, t.data, 1.0, opt);
    const TemperatureParams temp = TemperatureParams::from(1.0, c.profile);
    for (int l = 1; l <= 2; ++l) {
      run.theory[l - 1].push_back(deep_linear_delta(t.gxx, t.gyy, c.profile, temp, l));
      run.oracle[l - 1].push_back(r.mean[l - 1] - c.profile.m2(l) * t.gxx);
      run.oracle_se[l - 1].push_back(r.se[l - 1]);
    }
  }
  run.done = true;
  return run;
}

Outcome ac2() {
  Outcome o;
  Ac2Run& r = ac2_run();
  for (int l = 0; l < 2; ++l) {
    const double e = rel(r.oracle[l].back(), r.theory[l].back());
    o.require(e <= kAc2RelTol, "layer " + std::to_string(l + 1) + " rel err " + fmt(e));
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < r.widths.size(); ++i) pts.emplace_back(r.widths[i], r.oracle[l][i].norm());
    const double s = slope(pts);
    o.require(std::abs(s + 1.0) <= kAc2SlopeTol, "slope " + fmt(s));
  }
  return o;
}

Outcome ac3() {
  Outcome o;
  Ac2Run& r = ac2_run();
  bool exact = true;
  double worst = 0.0;
  for (std::size_t i = 0; i < r.widths.size(); ++i) {
    exact = exact && r.theory[1][i].norm() / r.theory[0][i].norm() == 2.0;
    worst = std::max(worst, std::abs(r.oracle[1][i].norm() / r.oracle[0][i].norm() / 2.0 - 1.0));
  }
  o.require(exact, "theory ratio exactly 2");
  o.require(worst <= kAc3RatioTol, "oracle ratio worst deviation " + fmt(100 * worst) + "%");
  return o;
}

// ---------------------------------------------------------------- AC4

Outcome ac4() {
  Outcome o;
  const Mat k = gram(synthetic_task(303, 8, 5, 1).data.x), gyy = gram(synthetic_task(304, 3, 5, 1).data.x);
  std::vector<double> err;
  for (double t : {1e-2, 1e-3}) {
    TemperatureParams temp;
    temp.beta = t;
    temp.sigma_d2 = 1.0;
    err.push_back((phi_operator(k, gyy, temp).entries - high_temp_expansion(k, gyy, temp, 2).entries).norm());
  }
  const double ratio = err[0] / err[1];
  o.require(ratio >= 1000.0 / kAc4Factor && ratio <= 1000.0 * kAc4Factor, "error ratio " + fmt(ratio) + " (t³: 1000)");
  WidthProfile prof;
  prof.hidden = {40, 60};
  prof.output = 3;
  prof.variances = {1.1, 0.9, 1.3};
  const Task task = synthetic_task(305, 9, 5, 3);
  double worst = 0.0;
  for (int l = 1; l <= 2; ++l) {
    const Mat lim = low_temp_linear(task.gxx, task.gyy, prof, l);
    const Mat fin = deep_linear_correction(task.gxx, task.gyy, prof, TemperatureParams::from(1e6, prof), l);
    worst = std::max(worst, (fin - lim).norm() / (lim - prof.m2(l) * task.gxx).norm());
  }
  o.require(worst <= kAc4LowTemp, "beta=1e6 vs limit " + fmt(worst));
  return o;
}

// ---------------------------------------------------------------- AC5

Outcome ac5() {
  Outcome o;
  {
    const Mat x = synthetic_task(401, 3, 4, 1).data.x;
    WidthProfile prof;
    prof.hidden = {7, 9};
    prof.output = 2;
    prof.variances = {1.2, 0.8, 1.1};
    const FourIndexKernel base = cnn_input_gram(x, 3, SpatialShape{});
    const std::vector<FilterSpec> f(2, FilterSpec::uniform(1, 0));
    const Mat gyy = gram(synthetic_task(402, 2, 4, 1).data.x);
    const TemperatureParams temp = TemperatureParams::from(1.3, prof);
    double worst = 0.0;
    for (int l = 1; l <= 2; ++l) {
      worst = std::max(worst, rel(cnn_linear_gp(base, f, prof, l).flat, mlp_linear_gp(gram(x), prof, l)));
      worst = std::max(worst, rel(CnnKernelCovariance(base, f, prof, l).materialize(), mlp_kernel_covariance(gram(x), prof, l)));
      worst = std::max(worst, rel(cnn_correction_delta(base, gyy, f, prof, temp, l, Readout::vectorization()).flat,
                                  deep_linear_delta(gram(x), gyy, prof, temp, l)));
    }
    o.require(worst <= kAc5Exact, "s=1 vs MLP " + fmt(worst));
  }
  {
    SpatialShape shape;
    shape.extents = {5, 4};
    const int ch = 2, p = 3;
    const Mat x = synthetic_task(403, ch * 20, p, 1).data.x;
    const std::vector<FilterSpec> f(2, FilterSpec::uniform(2, 1));
    const WidthProfile prof = WidthProfile::uniform(3, 4, 1, 1.1);
    double worst = 0.0;
    for (const std::vector<int>& off : {std::vector<int>{1, 0}, std::vector<int>{2, 3}}) {
      const FourIndexKernel k = cnn_linear_gp(cnn_input_gram(x, ch, shape), f, prof, 2);
      const FourIndexKernel ks = cnn_linear_gp(cnn_input_gram(cnn_shift_inputs(x, ch, shape, off), ch, shape), f, prof, 2);
      for (int mu = 0; mu < p; ++mu)
        for (int nu = 0; nu < p; ++nu)
          for (int a = 0; a < 20; ++a)
            for (int b = 0; b < 20; ++b)
              worst = std::max(worst, std::abs(ks(mu, nu, shape.shifted(a, off), shape.shifted(b, off)) - k(mu, nu, a, b)) /
                                          k.flat.norm());
    }
    o.require(worst <= kAc5Exact, "shift equivariance " + fmt(worst));
  }
  {
    const int n0 = 2, s = 4, p = 4;
    const long n = 256;
    NetworkConfig c;
    c.arch = Architecture::CnnLinear1d;
    c.input_dim = n0;
    c.shape.extents = {s};
    c.profile.hidden = {n, n};
    c.profile.output = 2;
    c.profile.variances = {1, 1, 1};
    FilterSpec f;
    f.dims = 1;
    f.halfwidth = 1;
    f.weights = {0.25, 0.5, 0.25};
    c.filters = {f, f};
    c.readout = Readout::vectorization();
    const Mat x = synthetic_task(404, n0 * s, p, 1).data.x;
    const FourIndexKernel base = cnn_input_gram(x, n0, c.shape);
    // Targets drawn from the readout GP.
    const Mat kr = readout_kernel(cnn_linear_gp(base, c.filters, c.profile, 2), c.readout);
    const Dataset data{x, psd_factor(kr) * synthetic_task(406, 2, p, 1).data.x};
    ImportanceOptions opt;
    opt.draws = 1000000;
    opt.seed = 405;
    const ImportanceKernels r = importance_oracle(c, data, 1.0, opt);
    const TemperatureParams temp = TemperatureParams::from(1.0, c.profile);
    for (int l = 1; l <= 2; ++l) {
      const Mat th = cnn_correction_delta(base, data.gyy(), c.filters, c.profile, temp, l, c.readout).flat;
      const Mat od = r.mean[l - 1] - cnn_linear_gp(base, c.filters, c.profile, l).flat;
      const double e = rel(od, th);
      o.require(e <= kAc5RelTol, "n=256 layer " + std::to_string(l) + " rel err " + fmt(e));
    }
  }
  return o;
}

// ---------------------------------------------------------------- AC6

Outcome ac6() {
  Outcome o;
  const int p = 3;
  Mat g = Mat::Zero(p, p);
  g.diagonal() << 0.8, 1.2, 0.5;
  const Mat gyy = gram(synthetic_task(501, 4, p, 1).data.x);
  const double s1 = 1.0;
  const long n1 = 50, nd = 2;
  TemperatureParams temp;
  temp.beta = 1.0;
  temp.sigma_d2 = 1.0;
  const ActivationSpec quad = ActivationSpec::polynomial({0, 0, 1});
  const NonlinearCorrection th = single_nonlinear_correction(g, gyy, s1, quad, temp, n1, nd);
  // Crude Monte Carlo four-point oracle in 100 batches.
  const int batches = 100;
  const long per = 100000;
  const Mat& phi = th.phi.entries;
  std::vector<Mat> kb, db;
  const Vec sd = (s1 * g.diagonal()).cwiseSqrt();
  for (int b = 0; b < batches; ++b) {
    Philox rng(502, static_cast<std::uint64_t>(b));
    Eigen::Matrix<double, 9, 1> sv = Eigen::Matrix<double, 9, 1>::Zero(), svw = sv;
    double sw = 0.0;
    for (long i = 0; i < per; ++i) {
      double f[3];
      for (int a = 0; a < p; ++a) {
        const double h = sd(a) * rng.normal();
        f[a] = h * h;
      }
      Eigen::Matrix<double, 9, 1> v;
      double w = 0.0;
      for (int a = 0; a < p; ++a)
        for (int c = 0; c < p; ++c) {
          v(a * p + c) = f[a] * f[c];
          w += phi(a, c) * v(a * p + c);
        }
      sv += v;
      svw += v * w;
      sw += w;
    }
    sv /= per;
    svw /= per;
    sw /= per;
    kb.push_back(Eigen::Map<const Mat>(sv.data(), p, p).transpose());
    const Eigen::Matrix<double, 9, 1> cov = svw - sv * sw;
    db.push_back(0.5 * nd / static_cast<double>(n1) * Eigen::Map<const Mat>(cov.data(), p, p).transpose());
  }
  auto summarize = [&](const std::vector<Mat>& xs, Mat& mean, Mat& se) {
    mean = Mat::Zero(p, p);
    for (const Mat& x : xs) mean += x;
    mean /= batches;
    se = Mat::Zero(p, p);
    for (const Mat& x : xs) se += (x - mean).cwiseAbs2();
    se = (se / (batches - 1.0) / batches).cwiseSqrt();
  };
  Mat km, kse, dm, dse;
  summarize(kb, km, kse);
  summarize(db, dm, dse);
  const double zk = max_z_sym(th.k_inf, km, kse), zd = max_z_sym(th.delta, dm, dse);
  o.require(zk <= kZ && zd <= kZ, "MC oracle max z K " + fmt(zk) + ", correction " + fmt(zd));
  const NonlinearCorrection diag = single_nonlinear_correction_diagonal(g, gyy, s1, quad, temp, n1, nd);
  const double e = std::max(rel(diag.k_inf, th.k_inf), rel(diag.delta, th.delta));
  o.require(e <= kAc6Paths, "diagonal path " + fmt(e));
  // Odd activation: perturbing G_yy(a,b) moves only the (a,b) correction entry.
  const ActivationSpec odd = ActivationSpec::polynomial({0, 1, 0, 0.3});
  const Mat base = single_nonlinear_correction(g, gyy, s1, odd, temp, n1, nd).delta;
  double leak = 0.0, moved = INFINITY;
  for (int a = 0; a < p; ++a)
    for (int b = a; b < p; ++b) {
      Mat gp = gyy;
      gp(a, b) += 0.1;
      if (a != b) gp(b, a) += 0.1;
      const Mat d = single_nonlinear_correction(g, gp, s1, odd, temp, n1, nd).delta - base;
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j) {
          const bool target = (i == a && j == b) || (i == b && j == a);
          if (target) moved = std::min(moved, std::abs(d(i, j)));
          else leak = std::max(leak, std::abs(d(i, j)) / base.norm());
        }
    }
  o.require(leak <= kAc6Locality && moved > 1e-6, "locality leak " + fmt(leak) + ", smallest target shift " + fmt(moved));
  return o;
}

// ---------------------------------------------------------------- AC7

Outcome ac7() {
  Outcome o;
  const int p = 6, ph = 4, n0 = 8, nd = 2;
  const Task t = synthetic_task(601, n0, p, nd);
  const Mat xh = synthetic_task(602, n0, ph, 1).data.x;
  Mat y = t.data.y;
  {
    Philox rng(603, 0);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] += 0.3 * rng.normal();
  }
  {
    const WidthProfile prof = WidthProfile::uniform(3, 100, nd);
    const PredictorMean tr = predictor_mean(PredictorGrams::training(t.gxx, y), prof, 1e6);
    const PredictorGrams gs = PredictorGrams::from_data(t.data.x, y, xh);
    const PredictorMean te = predictor_mean(gs, prof, 1e6);
    const Mat least_norm = xh * pseudoinverse(t.data.x) * y;
    const double a = rel(tr.mean, y), b = rel(te.mean, least_norm);
    o.require(a <= kAc7Limit && b <= kAc7Limit, "beta=1e6 train " + fmt(a) + ", test " + fmt(b));
  }
  {
    const long n = 512;
    const NetworkConfig c = linear_mlp(n0, {n, n}, nd);
    ImportanceOptions opt;
    opt.draws = 8000000;
    opt.seed = 604;
    const ImportancePredictor r = importance_predictor(c, Dataset{t.data.x, y}, xh, 1.0, opt);
    const PredictorMean pm = predictor_mean(PredictorGrams::from_data(t.data.x, y, xh), c.profile, 1.0);
    const double e = rel(r.mean - pm.gp, pm.correction);
    o.require(e <= kAc7RelTol, "n=512 mean shift rel err " + fmt(e));
  }
  {
    int agree = 0;
    const int instances = 20;
    Philox rng(605, 0);
    for (int i = 0; i < instances; ++i) {
      const Task ti = synthetic_task(700 + i, 8, 5, 2);
      const Mat xi = synthetic_task(800 + i, 8, 3, 1).data.x;
      // Scale the targets so tr(G_xx⁻¹G_yy)/p lands on either side of the threshold.
      const double r0 = spd_inverse(ti.gxx, "g").cwiseProduct(ti.gyy).sum() / 5.0;
      const double target = i % 2 == 0 ? 0.3 + 0.5 * rng.uniform() : 1.25 + 1.75 * rng.uniform();
      const Mat yi = std::sqrt(target / r0) * ti.data.y;
      const PredictorGrams gi = PredictorGrams::from_data(ti.data.x, yi, xi);
      auto ev = [&](long n) {
        return 0.5 * predictor_covariance(gi, WidthProfile::uniform(3, n, 2), 1e6).covariance.trace();
      };
      const double deriv = (ev(1001) - ev(999)) / 2.0;
      const WidthEffect e = width_benefit_condition(gi.gxx, gi.y * gi.y.transpose() / 2.0, WidthProfile::uniform(3, 1000, 2));
      if ((deriv < 0.0) == (e == WidthEffect::Improves) && e != WidthEffect::Marginal) ++agree;
    }
    o.require(agree == instances, "width-benefit verdicts " + std::to_string(agree) + "/" + std::to_string(instances));
  }
  return o;
}

// ---------------------------------------------------------------- AC8

Outcome ac8() {
  Outcome o;
  const Mat g = gram(synthetic_task(901, 6, 3, 1).data.x), gyy = gram(synthetic_task(902, 6, 3, 1).data.x);
  std::vector<double> dev;
  double res = 0.0;
  for (long n : {5000L, 10000L}) {
    WidthProfile prof = WidthProfile::uniform(3, n, 3);
    const AitchisonSolution s = aitchison_zero_temp_solve(g, gyy, prof);
    res = std::max(res, s.residual);
    double d = 0.0;
    for (int l = 1; l <= 2; ++l) d += (s.kernels[l - 1] - low_temp_linear(g, gyy, prof, l)).squaredNorm();
    dev.push_back(std::sqrt(d));
  }
  o.require(res <= kAc8Residual, "zero-temperature recurrence residual " + fmt(res));
  const double q = dev[0] / dev[1];
  o.require(std::abs(q - 4.0) <= kAc8QuarterTol, "recurrence deviation ratio " + fmt(q));

  const Task t = synthetic_task(903, 6, 4, 2);
  const double s2 = 1.2;
  const int d = 3;
  const long n = 1000000;
  const WidthProfile prof = WidthProfile::uniform(d, n, 2, s2);
  double root = 0.0;
  std::vector<double> ls;
  for (double alpha : {0.02, 0.01}) {
    double e = 0.0;
    for (int l = 1; l <= d - 1; ++l) {
      const LiSompolinskyResult r = li_sompolinsky_limit(t.gxx, t.data.y, s2, d, alpha, n, l);
      root = std::max(root, r.max_root_residual);
      e += (r.kernel - low_temp_linear(t.gxx, t.gyy, prof, l)).squaredNorm();
    }
    ls.push_back(std::sqrt(e));
  }
  o.require(root <= kAc8Root, "root residual " + fmt(root));
  const double h = ls[0] / ls[1];
  o.require(std::abs(h - 2.0) <= kAc8HalfTol, "proportional-limit deviation ratio " + fmt(h));
  return o;
}

// ---------------------------------------------------------------- AC9

Outcome ac9() {
  Outcome o;
  {
    // E = θ²/2 with no prior term: stationary variance 1/β.
    const double beta = 2.5, dt = 1e-3;
    const int replicas = 1000;
    const long burn = 5000, steps = 20000;
    Vec theta = Vec::Zero(replicas), prec = Vec::Zero(replicas);
    std::vector<double> noise(replicas);
    Vec acc = Vec::Zero(replicas);
    for (long s = 0; s < burn + steps; ++s) {
      step_noise(910, 0, s, noise.data(), noise.size());
      const Vec grad = theta;
      langevin_update(theta, grad, prec, beta, dt, -1.0, noise.data());
      if (s >= burn) acc += theta.cwiseAbs2();
    }
    acc /= steps;
    const double mean = acc.mean();
    const double se = std::sqrt((acc.array() - mean).square().sum() / (replicas - 1.0) / replicas);
    const double z = std::abs(mean - 1.0 / beta) / se;
    o.require(z <= kZ, "OU variance " + fmt(mean) + " vs " + fmt(1.0 / beta) + " (z " + fmt(z) + ")");
  }
  {
    // Conjugate linear model f = Xw/√n₀ with prior w ~ N(0, σ²).
    const Mat x = synthetic_task(911, 3, 5, 1).data.x;
    const Vec y = synthetic_task(912, 1, 5, 1).data.x.col(0);
    const double beta = 2.0, s2 = 1.5, dt = 2e-3;
    const Mat a = beta * x.transpose() * x / 3.0 + Mat::Identity(3, 3) / s2;
    const Vec exact = a.ldlt().solve(beta * x.transpose() * y / std::sqrt(3.0));
    const int replicas = 100;
    const long burn = 5000, steps = 50000;
    std::vector<Vec> means(replicas, Vec::Zero(3));
    std::vector<double> noise(3);
    const Vec prec = Vec::Constant(3, 1.0 / s2);
    for (int r = 0; r < replicas; ++r) {
      Vec w = Vec::Zero(3);
      for (long s = 0; s < burn + steps; ++s) {
        step_noise(913, r, s, noise.data(), 3);
        const Vec grad = x.transpose() * (x * w / std::sqrt(3.0) - y) / std::sqrt(3.0);
        langevin_update(w, grad, prec, beta, dt, -1.0, noise.data());
        if (s >= burn) means[r] += w;
      }
      means[r] /= steps;
    }
    Vec m = Vec::Zero(3), v = Vec::Zero(3);
    for (const Vec& mr : means) m += mr;
    m /= replicas;
    for (const Vec& mr : means) v += (mr - m).cwiseAbs2();
    const Vec se = (v / (replicas - 1.0) / replicas).cwiseSqrt();
    const double z = ((m - exact).cwiseAbs().cwiseQuotient(se)).maxCoeff();
    o.require(z <= kZ, "conjugate posterior mean max z " + fmt(z));
  }
  {
    NetworkConfig c = linear_mlp(3, {6, 5}, 1);
    c.profile.variances = {1.3, 0.9, 1.0};
    const Dataset d{synthetic_task(914, 3, 3, 1).data.x, synthetic_task(915, 1, 3, 1).data.x};
    LangevinSchedule s;
    s.dt = 0.01;
    s.burn_in = 2000;
    s.sample_steps = 200000;
    s.thinning = 10;
    s.chains = 4;
    s.seed = 916;
    const KernelEstimate e = run_chains(Network(c), d, 0.0, s);
    double z = 0.0;
    for (int l = 1; l <= 2; ++l) z = std::max(z, max_z_sym(e.mean[l - 1], c.profile.m2(l) * gram(d.x), e.se[l - 1]));
    o.require(z <= kZ, "beta=0 prior means max z " + fmt(z));
  }
  {
    std::vector<NetworkConfig> cfgs;
    cfgs.push_back(linear_mlp(3, {6, 5}, 2));
    NetworkConfig relu = linear_mlp(3, {6, 5, 4}, 2);
    relu.arch = Architecture::MlpRelu;
    cfgs.push_back(relu);
    NetworkConfig erf = linear_mlp(3, {6}, 2);
    erf.arch = Architecture::SingleNonlinear;
    erf.activation = ActivationSpec::erf();
    cfgs.push_back(erf);
    for (bool gap : {false, true}) {
      NetworkConfig c = linear_mlp(2, {3, 3}, 2);
      c.arch = Architecture::CnnLinear1d;
      c.shape.extents = {5};
      c.filters.assign(2, FilterSpec::uniform(1, 1));
      c.readout = gap ? Readout::global_average(5) : Readout::vectorization();
      cfgs.push_back(c);
    }
    NetworkConfig c2 = linear_mlp(1, {3, 2}, 1);
    c2.arch = Architecture::CnnLinear2d;
    c2.shape.extents = {3, 3};
    c2.filters.assign(2, FilterSpec::uniform(2, 1));
    cfgs.push_back(c2);
    NetworkConfig sk = linear_mlp(3, {5, 4, 4}, 1);
    SkipConnectivity conn = SkipConnectivity::chain(sk.profile);
    conn.sigma2(2, 0) = 0.5;
    conn.sigma2(3, 1) = 0.4;
    sk.skip = conn;
    cfgs.push_back(sk);
    double worst = 0.0;
    for (const NetworkConfig& c : cfgs) {
      const Network net(c);
      Philox rng(917, 0);
      const Dataset d{synthetic_task(918, c.input_width(), 3, 1).data.x, synthetic_task(919, 1, 3, c.profile.output).data.y};
      worst = std::max(worst, gradient_check(net, d, net.sample_prior(rng), 100).max_relative_error);
    }
    o.require(worst <= kAc9Grad, "gradient check on " + std::to_string(cfgs.size()) + " architectures, worst " + fmt(worst));
  }
  return o;
}

// ---------------------------------------------------------------- AC10

struct Ac10Cell {
  std::vector<double> dev;  // per layer, noise-debiased norm
};

Ac10Cell ac10_cell(const Task& t, long n, bool bottleneck) {
  NetworkConfig c;
  c.arch = Architecture::MlpRelu;
  c.input_dim = static_cast<int>(t.data.x.cols());
  c.profile.hidden = {n, bottleneck ? 8L : n, n};
  c.profile.output = t.data.y.cols();
  c.profile.variances = {2, 2, 2, 1};
  LangevinSchedule s;
  s.dt = 5e-3;
  s.burn_in = 25000;
  s.sample_steps = 100000;
  s.thinning = 10;
  s.chains = 1;
  s.seed = 1000 + static_cast<std::uint64_t>(n) + (bottleneck ? 1 : 0);
  RunOptions ro;
  ro.coupled_prior = true;
  ro.lanes = 1;
  const KernelEstimate e = run_chains(Network(c), t.data, 1.0, s, ro);
  // Finite-width prior mean from exact prior draws.
  const PriorKernelSampler ps(c, t.data.x);
  const int draws = 10000;
  std::vector<Mat> pm(3, Mat::Zero(t.gxx.rows(), t.gxx.cols()));
  for (int i = 0; i < draws; ++i) {
    Philox rng(1100 + static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(i));
    const std::vector<Mat> k = ps.draw(rng);
    for (int l = 0; l < 3; ++l) pm[l] += k[l];
  }
  const std::vector<Mat> kinf = deep_nonlinear_gp(t.gxx, c.profile, ActivationSpec::relu());
  Ac10Cell cell;
  for (int l = 0; l < 3; ++l) {
    const Mat dev = e.coupled_diff[l] + pm[l] / draws - kinf[l];
    const double noise = e.coupled_diff_se[l].squaredNorm();
    cell.dev.push_back(std::sqrt(std::max(dev.squaredNorm() - noise, 1e-300)));
  }
  return cell;
}

Outcome ac10() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const Task t = synthetic_task(1001, 32, 32, 4);
  const std::vector<long> widths{32, 64, 128};
  for (bool bottleneck : {false, true}) {
    std::vector<Ac10Cell> cells;
    for (long n : widths) cells.push_back(ac10_cell(t, n, bottleneck));
    const std::string fam = bottleneck ? "(n,8,n)" : "(n,n,n)";
    for (int l = 0; l < 3; ++l) {
      std::vector<std::pair<double, double>> pts;
      for (std::size_t i = 0; i < widths.size(); ++i) pts.emplace_back(widths[i], cells[i].dev[l]);
      const double s = slope(pts);
      const std::string name = fam + " layer " + std::to_string(l + 1) + " slope " + fmt(s);
      if (bottleneck && l == 1) o.require(s > kAc10FlatSlope, name);
      else if (!bottleneck || l == 0) o.require(std::abs(s + 1.0) <= kAc10FirstTol, name);
      else o.detail << "; " << name;
    }
  }
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  o.require(minutes <= kAc10Minutes, "runtime " + fmt(minutes, 3) + " min");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> all = {
      {"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4}, {"AC5", ac5},
      {"AC6", ac6}, {"AC7", ac7}, {"AC8", ac8}, {"AC9", ac9}, {"AC10", ac10}};
  std::set<std::string> pick(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, fn] : all) {
    if (!pick.empty() && !pick.count(name)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = fn();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail << "exception: " << e.what();
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%-4s %s  %s  (%.1f s)\n", name.c_str(), out.pass ? "PASS" : "FAIL", out.detail.str().c_str(), sec);
    std::fflush(stdout);
    if (!out.pass) ++failed;
  }
  return failed;
}
