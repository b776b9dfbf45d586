#include "fwbnn/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fwbnn {

PredictorGrams PredictorGrams::from_data(const Mat& x, const Mat& y, const Mat& x_hat) {
  require(x.cols() == x_hat.cols() && x.cols() >= 1, "predictor: train and test inputs need the same width");
  require(y.rows() == x.rows(), "predictor: X and Y row counts differ");
  const double n0 = static_cast<double>(x.cols());
  PredictorGrams g;
  g.gxx = symmetrize(x * x.transpose() / n0);
  g.gxh = x * x_hat.transpose() / n0;
  g.ghh = symmetrize(x_hat * x_hat.transpose() / n0);
  g.y = y;
  return g;
}

PredictorGrams PredictorGrams::training(const Mat& gxx, const Mat& y) {
  PredictorGrams g;
  g.gxx = gxx;
  g.gxh = gxx;
  g.ghh = gxx;
  g.y = y;
  return g;
}

void PredictorGrams::validate() const {
  require(gxx.rows() == gxx.cols() && gxx.rows() >= 1, "predictor: G_xx must be square");
  require(gxh.rows() == gxx.rows(), "predictor: G_xx̂ must have p rows");
  require(ghh.rows() == gxh.cols() && ghh.cols() == gxh.cols(), "predictor: G_x̂x̂ must be p̂ x p̂");
  require(y.rows() == gxx.rows() && y.cols() >= 1, "predictor: Y must be p x n_d");
}

namespace {

struct LinearBlocks {
  Mat k, r, kh;  // K∞, R̂∞, K̂∞
  Mat gi;        // Γ⁻¹
  double sd2 = 1.0;
  double eps = 0.0;  // 1/(βσ_d²)
  double s = 0.0;    // Σ 1/n_ℓ
  long nd = 1;
};

LinearBlocks linear_blocks(const PredictorGrams& g, const WidthProfile& profile, double beta, const char* what) {
  g.validate();
  profile.validate();
  require(beta > 0.0 && std::isfinite(beta), std::string(what) + ": beta must be finite and positive");
  require(g.y.cols() == profile.output, std::string(what) + ": Y columns must equal n_d");
  const int d = profile.depth();
  const double m2 = profile.m2(d - 1);
  LinearBlocks b;
  b.k = m2 * g.gxx;
  b.r = m2 * g.gxh;
  b.kh = m2 * g.ghh;
  b.sd2 = profile.variance(d);
  b.eps = 1.0 / (beta * b.sd2);
  b.s = profile.inverse_width_sum(d - 1);
  b.nd = profile.output;
  Mat gamma = b.k;
  gamma.diagonal().array() += b.eps;
  b.gi = SpdSolver(gamma, std::string(what) + ": Gamma").inverse();
  return b;
}

}  // namespace

PredictorMean predictor_mean(const PredictorGrams& grams, const WidthProfile& profile, double beta) {
  const LinearBlocks b = linear_blocks(grams, profile, beta, "predictor_mean");
  const int p = static_cast<int>(b.k.rows());
  const Mat gyy = grams.y * grams.y.transpose() / static_cast<double>(b.nd);
  const Mat phi = b.gi * gyy * b.gi / b.sd2 - b.gi;
  const Mat gk = b.gi * b.k;
  const Mat m = gk + gk.trace() * Mat::Identity(p, p) - static_cast<double>(b.nd) * phi * b.k;
  PredictorMean out;
  out.gp = b.r.transpose() * b.gi * grams.y;
  out.correction = -(b.eps * b.s) * (b.r.transpose() * b.gi * m * b.gi * grams.y);
  out.mean = out.gp + out.correction;
  return out;
}

PredictorCovariance predictor_covariance(const PredictorGrams& grams, const WidthProfile& profile, double beta) {
  const LinearBlocks b = linear_blocks(grams, profile, beta, "predictor_covariance");
  const Mat& y = grams.y;
  const int ph = static_cast<int>(b.r.cols());
  const int nd = static_cast<int>(b.nd);
  const Mat gyy = y * y.transpose() / static_cast<double>(nd);
  const Mat phi = b.gi * gyy * b.gi / b.sd2 - b.gi;
  const Mat gi2 = b.gi * b.gi;
  const double tr = (b.gi * b.k).trace();
  const Mat schur = b.kh - b.r.transpose() * b.gi * b.r;  // K̂ − R̂ᵀΓ⁻¹R̂
  const Mat rg2r = b.r.transpose() * gi2 * b.r;
  const Mat mhat = -tr * schur + b.eps * tr * rg2r - b.eps * b.eps * (b.r.transpose() * gi2 * b.gi * b.r) +
                   static_cast<double>(nd) * b.eps * b.eps * (b.r.transpose() * b.gi * phi * b.gi * b.r);
  const Mat ykY = y.transpose() * b.gi * b.k * b.gi * y;  // n_d × n_d
  const Mat yg2r = y.transpose() * gi2 * b.r;               // n_d × p̂
  const Eigen::Index q = static_cast<Eigen::Index>(ph) * nd;
  PredictorCovariance out;
  out.gp = Mat::Zero(q, q);
  out.correction = Mat::Zero(q, q);
  for (int mu = 0; mu < ph; ++mu)
    for (int nu = 0; nu < ph; ++nu)
      for (int j = 0; j < nd; ++j)
        for (int k = 0; k < nd; ++k) {
          const Eigen::Index r = mu * nd + j, c = nu * nd + k;
          const double delta = j == k ? 1.0 : 0.0;
          out.gp(r, c) = b.sd2 * schur(mu, nu) * delta;
          const double bracket = mhat(mu, nu) * delta + ykY(j, k) * schur(mu, nu) / b.sd2 -
                                 b.eps * ykY(j, k) * rg2r(mu, nu) / b.sd2 +
                                 b.eps * b.eps * yg2r(j, nu) * yg2r(k, mu) / b.sd2;
          out.correction(r, c) = b.sd2 * b.s * bracket;
        }
  out.correction = symmetrize(out.correction);
  out.covariance = out.gp + out.correction;
  return out;
}

ErrorDecomposition decompose_error(const Mat& mean, const Mat& covariance, const Mat& targets) {
  require(mean.rows() == targets.rows() && mean.cols() == targets.cols(), "decompose_error: shape mismatch");
  require(covariance.rows() == mean.size() && covariance.cols() == mean.size(),
          "decompose_error: covariance must be (p n_d) x (p n_d)");
  ErrorDecomposition e;
  e.bias = 0.5 * (mean - targets).squaredNorm();
  e.variance = 0.5 * covariance.trace();
  return e;
}

BiasVariance bias_variance(const Mat& train_mean, const Mat& train_cov, const Mat& y, const Mat& test_mean,
                           const Mat& test_cov, const Mat& y_hat) {
  BiasVariance bv;
  bv.train = decompose_error(train_mean, train_cov, y);
  bv.test = decompose_error(test_mean, test_cov, y_hat);
  return bv;
}

double low_temp_test_variance(const PredictorGrams& grams, const WidthProfile& profile) {
  grams.validate();
  profile.validate();
  const int d = profile.depth();
  const double m2 = profile.m2(d - 1);
  const double sd2 = profile.variance(d);
  const long nd = profile.output;
  const int p = static_cast<int>(grams.gxx.rows());
  const Mat k = m2 * grams.gxx;
  const SpdSolver solver(k, "low_temp_test_variance: K");
  const Mat r = m2 * grams.gxh;
  const double schur = (m2 * grams.ghh - r.transpose() * solver.solve(r)).trace();
  const Mat gyy = grams.y * grams.y.transpose() / static_cast<double>(nd);
  const double t = solver.solve(gyy).trace();
  return 0.5 * static_cast<double>(nd) * sd2 * schur * (1.0 + profile.inverse_width_sum(d - 1) * (t / sd2 - p));
}

std::string to_string(WidthEffect e) {
  switch (e) {
    case WidthEffect::Improves: return "improves";
    case WidthEffect::Worsens: return "worsens";
    case WidthEffect::Marginal: return "marginal";
  }
  return "?";
}

WidthEffect width_benefit_condition(const Mat& gxx, const Mat& gyy, const WidthProfile& profile) {
  profile.validate();
  require(gxx.rows() == gxx.cols() && gyy.rows() == gxx.rows() && gyy.cols() == gxx.cols(),
          "width_benefit_condition: shape mismatch");
  Eigen::FullPivLU<Mat> lu(gxx);
  if (!lu.isInvertible()) fail(ErrorKind::InvalidArgument, "width_benefit_condition: G_xx is singular");
  const double lhs = lu.solve(gyy).trace() / static_cast<double>(gxx.rows());
  const double rhs = profile.m2(profile.depth());
  if (std::abs(lhs - rhs) <= 1e-12 * std::max(1.0, std::abs(rhs))) return WidthEffect::Marginal;
  return lhs > rhs ? WidthEffect::Improves : WidthEffect::Worsens;
}

std::string to_string(MeanRegime r) {
  switch (r) {
    case MeanRegime::Zero: return "zero";
    case MeanRegime::Ridge: return "ridge";
    case MeanRegime::Interpolant: return "interpolant";
  }
  return "?";
}

std::string to_string(VarianceRegime r) {
  switch (r) {
    case VarianceRegime::Zero: return "zero";
    case VarianceRegime::Finite: return "finite";
    case VarianceRegime::Divergent: return "divergent";
  }
  return "?";
}

OmegaRegime omega_regime(double omega, int depth) {
  require(depth >= 1, "omega_regime: depth must be >= 1");
  require(std::isfinite(omega), "omega_regime: omega must be finite");
  constexpr double tol = 1e-12;
  const double edge = 1.0 / depth - 1.0;
  OmegaRegime r;
  if (std::abs(omega - edge) <= tol) {
    r.mean = MeanRegime::Ridge;
  } else {
    r.mean = omega > edge ? MeanRegime::Zero : MeanRegime::Interpolant;
  }
  if (std::abs(omega + 1.0) <= tol) {
    r.variance = VarianceRegime::Finite;
  } else {
    r.variance = omega > -1.0 ? VarianceRegime::Zero : VarianceRegime::Divergent;
  }
  return r;
}

// ---------------------------------------------------------------- Aitchison recurrence

namespace {

void check_aitchison(const Mat& gxx, const Mat& gyy, const WidthProfile& profile) {
  profile.validate();
  require(gxx.rows() == gxx.cols() && gyy.rows() == gxx.rows() && gyy.cols() == gxx.cols(),
          "aitchison: shape mismatch");
  require(is_psd(gxx) && min_eigenvalue(gxx) > kPinvTol, "aitchison: G_xx must be invertible");
  require(is_psd(gyy) && min_eigenvalue(gyy) > kPinvTol, "aitchison: G_yy must be invertible");
}

// Widths n_0..n_d with n_0 unused.
double width_at(const WidthProfile& profile, int l) { return static_cast<double>(profile.width(l)); }

Mat sym_sqrt(const Mat& a, bool inverse) {
  const Spectrum sp = eigendecompose(symmetrize(a));
  Vec v = sp.eigenvalues.cwiseMax(0.0).cwiseSqrt();
  if (inverse) v = v.cwiseInverse();
  return sp.eigenvectors * v.asDiagonal() * sp.eigenvectors.transpose();
}

}  // namespace

double aitchison_residual(const Mat& gxx, const Mat& gyy, const WidthProfile& profile,
                          const std::vector<Mat>& kernels) {
  const int d = profile.depth();
  require(static_cast<int>(kernels.size()) == d - 1, "aitchison_residual: need d-1 kernels");
  auto at = [&](int l) -> const Mat& { return l == 0 ? gxx : (l == d ? gyy : kernels[l - 1]); };
  double worst = 0.0;
  for (int l = 1; l <= d - 1; ++l) {
    const double nl = width_at(profile, l), nn = width_at(profile, l + 1);
    const Mat ki = spd_inverse(at(l), "aitchison_residual");
    const Mat kpi = spd_inverse(at(l - 1), "aitchison_residual");
    const Mat r = -(nn - nl) * ki + nn * ki * at(l + 1) * ki - nl * kpi;
    worst = std::max(worst, r.norm() / (nl + nn));
  }
  return worst;
}

AitchisonSolution aitchison_zero_temp_solve(const Mat& gxx, const Mat& gyy, const WidthProfile& profile,
                                            const AitchisonOptions& options) {
  check_aitchison(gxx, gyy, profile);
  require(options.damping > 0.0 && options.damping <= 1.0, "aitchison: damping must be in (0, 1]");
  const int d = profile.depth();
  AitchisonSolution sol;
  for (int l = 1; l <= d - 1; ++l) sol.kernels.push_back(gxx + profile.width_factor(l) * (gyy - gxx));
  auto at = [&](int l) -> const Mat& { return l == 0 ? gxx : (l == d ? gyy : sol.kernels[l - 1]); };
  sol.residual = aitchison_residual(gxx, gyy, profile, sol.kernels);
  // Each layer solves n_ℓ K A K + (n_{ℓ+1} − n_ℓ) K = n_{ℓ+1} B exactly (A = K_{ℓ-1}⁻¹, B = K_{ℓ+1});
  // with K = A^{-1/2} X A^{-1/2}, X is the positive root of a scalar quadratic on the spectrum of
  // C = n_{ℓ+1} A^{1/2} B A^{1/2}.
  while (sol.residual > options.tolerance && sol.iterations < options.max_iterations) {
    for (int l = 1; l <= d - 1; ++l) {
      const double nl = width_at(profile, l), nn = width_at(profile, l + 1);
      const Mat ah = sym_sqrt(at(l - 1), true);   // A^{1/2} = K_{ℓ-1}^{-1/2}
      const Mat ahi = sym_sqrt(at(l - 1), false);  // A^{-1/2}
      const Spectrum c = eigendecompose(symmetrize(nn * ah * at(l + 1) * ah));
      const double b = nn - nl;
      Vec x(c.eigenvalues.size());
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double ci = std::max(c.eigenvalues(i), 0.0);
        x(i) = 2.0 * ci / (b + std::sqrt(b * b + 4.0 * nl * ci));  // stable positive root
      }
      const Mat target = symmetrize(ahi * c.eigenvectors * x.asDiagonal() * c.eigenvectors.transpose() * ahi);
      sol.kernels[l - 1] = (1.0 - options.damping) * sol.kernels[l - 1] + options.damping * target;
    }
    ++sol.iterations;
    sol.residual = aitchison_residual(gxx, gyy, profile, sol.kernels);
  }
  if (!(sol.residual <= options.tolerance)) {
    std::ostringstream os;
    os << "aitchison: no convergence after " << sol.iterations << " iterations (residual " << sol.residual << ")";
    fail(ErrorKind::ConvergenceFailure, os.str());
  }
  return sol;
}

// ---------------------------------------------------------------- Li–Sompolinsky

double li_sompolinsky_root(double omega, double sigma2, int depth, double alpha, double* residual) {
  require(alpha > 0.0 && sigma2 > 0.0 && depth >= 2 && omega >= 0.0, "li_sompolinsky_root: bad arguments");
  const double c = alpha * std::pow(sigma2, -(depth - 1)) * omega;
  auto f = [&](double z) { return z - c * std::pow(z, -(depth - 1)) - (1.0 - alpha); };
  auto df = [&](double z) { return 1.0 + c * (depth - 1) * std::pow(z, -depth); };
  double lo = 1e-6, hi = 1.0 + c + 1.0;
  if (!(f(lo) < 0.0 && f(hi) > 0.0)) {
    fail(ErrorKind::ConvergenceFailure, "li_sompolinsky_root: no bracketed root on (0, inf)");
  }
  for (int i = 0; i < 200 && hi - lo > 1e-15 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  double z = 0.5 * (lo + hi);
  for (int i = 0; i < 5; ++i) {
    const double step = f(z) / df(z);
    if (!std::isfinite(step)) break;
    z -= step;
  }
  const double res = std::abs(f(z));
  if (residual) *residual = res;
  if (!(res <= 1e-12 * std::max(1.0, c))) {
    fail(ErrorKind::ConvergenceFailure, "li_sompolinsky_root: residual above 1e-12");
  }
  return z;
}

LiSompolinskyResult li_sompolinsky_limit(const Mat& gxx, const Mat& y, double sigma2, int depth, double alpha, long n,
                                         int layer) {
  require(gxx.rows() == gxx.cols() && y.rows() == gxx.rows(), "li_sompolinsky: shape mismatch");
  require(layer >= 1 && layer <= depth - 1, "li_sompolinsky: layer must be in 1..d-1");
  require(n >= 1, "li_sompolinsky: width must be >= 1");
  const int p = static_cast<int>(gxx.rows());
  const long nd = y.cols();
  LiSompolinskyResult out;
  const Mat r = y.transpose() * pseudoinverse(symmetrize(gxx)) * y / (sigma2 * p);
  const Spectrum sp = eigendecompose(symmetrize(r));
  out.omega = sp.eigenvalues;
  out.v = sp.eigenvectors;
  out.z.resize(nd);
  out.m_diag.resize(nd);
  for (long k = 0; k < nd; ++k) {
    double res = 0.0;
    const double z = li_sompolinsky_root(std::max(out.omega(k), 0.0), sigma2, depth, alpha, &res);
    out.max_root_residual = std::max(out.max_root_residual, res);
    out.z(k) = z;
    double geo = 0.0;  // (z^ℓ − 1)/(z − 1)
    for (int i = 0; i < layer; ++i) geo += std::pow(z, i);
    out.m_diag(k) = std::pow(z, -(depth - 1)) * geo;
  }
  const Mat yv = y * out.v;
  const Mat inner = yv * out.m_diag.asDiagonal() * yv.transpose();
  const double nn = static_cast<double>(n);
  out.kernel = std::pow(sigma2, layer) * (std::pow(1.0 - static_cast<double>(nd) / nn, layer) * gxx +
                                          inner * std::pow(sigma2, -depth) / nn);
  out.kernel = symmetrize(out.kernel);
  return out;
}

}  // namespace fwbnn
