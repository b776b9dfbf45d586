#include "fwbnn/corrections.hpp"

#include <cmath>
#include <sstream>

namespace fwbnn {

TemperatureParams TemperatureParams::from(double beta, const WidthProfile& profile) {
  TemperatureParams t;
  t.beta = beta;
  t.sigma_d2 = profile.variance(profile.depth());
  t.low_temperature_limit = std::isinf(beta);
  return t;
}

TemperatureParams TemperatureParams::zero_temperature(double sigma_d2) {
  TemperatureParams t;
  t.beta = INFINITY;
  t.sigma_d2 = sigma_d2;
  t.low_temperature_limit = true;
  return t;
}

void TemperatureParams::validate() const {
  require(sigma_d2 > 0.0 && std::isfinite(sigma_d2), "temperature: sigma_d^2 must be positive and finite");
  if (low_temperature_limit) return;
  require(beta >= 0.0 && !std::isnan(beta), "temperature: beta must be >= 0");
  if (std::isinf(beta)) fail(ErrorKind::InvalidArgument, "temperature: infinite beta requires the low-temperature flag");
}

namespace {

bool limit_mode(const TemperatureParams& t) { return t.low_temperature_limit; }

void check_pair(const Mat& k, const Mat& gyy, const char* what) {
  require(k.rows() == k.cols() && gyy.rows() == gyy.cols() && k.rows() == gyy.rows(),
          std::string(what) + ": kernel and G_yy must be square of equal size");
}

// Inverse of the readout kernel for the β = ∞ branch; singular kernels need projectors.
Mat limit_inverse(const Mat& k, const char* what) {
  const Spectrum sp = eigendecompose(symmetrize(k));
  const double top = std::max(sp.eigenvalues(0), 0.0);
  const double bottom = sp.eigenvalues(sp.eigenvalues.size() - 1);
  if (!(bottom > kPinvTol * std::max(top, 1.0))) {
    fail(ErrorKind::NeedsFiniteTemperature,
         std::string(what) + ": kernel is singular; the zero-temperature limit needs a finite beta");
  }
  return spd_inverse(k, what);
}

}  // namespace

PhiMatrix phi_operator(const Mat& k, const Mat& gyy, const TemperatureParams& temp) {
  temp.validate();
  check_pair(k, gyy, "phi_operator");
  const int p = static_cast<int>(k.rows());
  PhiMatrix out;
  if (limit_mode(temp)) {
    const Mat ki = limit_inverse(k, "phi_operator");
    out.entries = symmetrize(ki * (gyy / temp.sigma_d2 - k) * ki);
    return out;
  }
  if (temp.beta == 0.0) {
    out.entries = Mat::Zero(p, p);
    return out;
  }
  out.gamma = k;
  out.gamma.diagonal().array() += 1.0 / (temp.beta * temp.sigma_d2);
  const SpdSolver solver(out.gamma, "phi_operator: Gamma");
  const Mat gi = solver.inverse();
  out.entries = symmetrize(gi * gyy * gi / temp.sigma_d2 - gi);
  return out;
}

Mat conjecture1_mean(const Mat& prior_mean, const Mat& cov_o_k, const PhiMatrix& phi, long nd) {
  const Eigen::Index p = phi.entries.rows();
  require(cov_o_k.rows() == prior_mean.size(), "conjecture1_mean: one covariance row per observable entry");
  require(cov_o_k.cols() == p * p, "conjecture1_mean: covariance columns must be p^2");
  require(nd >= 1, "conjecture1_mean: n_d must be >= 1");
  // Φ flattened row-major to match column ρ·p+λ.
  Vec phi_flat(p * p);
  for (Eigen::Index r = 0; r < p; ++r)
    for (Eigen::Index l = 0; l < p; ++l) phi_flat(r * p + l) = phi.entries(r, l);
  const Vec shift = 0.5 * static_cast<double>(nd) * (cov_o_k * phi_flat);
  Mat out = prior_mean;
  for (Eigen::Index i = 0; i < prior_mean.rows(); ++i)
    for (Eigen::Index j = 0; j < prior_mean.cols(); ++j) out(i, j) += shift(i * prior_mean.cols() + j);
  return out;
}

// ---------------------------------------------------------------- deep linear MLP

namespace {

void check_linear(const Mat& gxx, const Mat& gyy, const WidthProfile& profile, int layer, const char* what) {
  profile.validate();
  check_pair(gxx, gyy, what);
  require(layer >= 1 && layer <= profile.depth() - 1, std::string(what) + ": layer must be in 1..d-1");
}

// GΓ⁻¹(m_d⁻²G_yy − Γ)Γ⁻¹G with Γ = G + I/(βm_d²).
Mat linear_bracket(const Mat& gxx, const Mat& gyy, double md2, const TemperatureParams& temp, const char* what) {
  if (limit_mode(temp)) {
    limit_inverse(gxx, what);
    return gyy / md2 - gxx;
  }
  if (temp.beta == 0.0) return Mat::Zero(gxx.rows(), gxx.cols());
  Mat gamma = gxx;
  gamma.diagonal().array() += 1.0 / (temp.beta * md2);
  const SpdSolver solver(gamma, std::string(what) + ": Gamma");
  const Mat a = solver.solve(gxx);  // Γ⁻¹G
  return symmetrize(a.transpose() * (gyy / md2 - gamma) * a);
}

}  // namespace

Mat deep_linear_delta(const Mat& gxx, const Mat& gyy, const WidthProfile& profile, const TemperatureParams& temp,
                      int layer) {
  check_linear(gxx, gyy, profile, layer, "deep_linear_correction");
  temp.validate();
  const double md2 = profile.m2(profile.depth());
  return (profile.m2(layer) * profile.width_factor(layer)) * linear_bracket(gxx, gyy, md2, temp, "deep_linear_correction");
}

Mat deep_linear_correction(const Mat& gxx, const Mat& gyy, const WidthProfile& profile, const TemperatureParams& temp,
                           int layer) {
  const Mat delta = deep_linear_delta(gxx, gyy, profile, temp, layer);
  return profile.m2(layer) * gxx + delta;
}

Mat low_temp_linear(const Mat& gxx, const Mat& gyy, const WidthProfile& profile, int layer) {
  check_linear(gxx, gyy, profile, layer, "low_temp_linear");
  limit_inverse(gxx, "low_temp_linear");
  const double md2 = profile.m2(profile.depth());
  return profile.m2(layer) * (gxx + profile.width_factor(layer) * (gyy / md2 - gxx));
}

EigenbasisCorrection eigenbasis_correction(const Mat& gxx, const Mat& gyy, const WidthProfile& profile,
                                           const TemperatureParams& temp, int layer) {
  check_linear(gxx, gyy, profile, layer, "eigenbasis_correction");
  temp.validate();
  EigenbasisCorrection out;
  out.spectrum = eigendecompose(symmetrize(gxx));
  const Vec lam = out.spectrum.eigenvalues.cwiseMax(0.0);
  const double md2 = profile.m2(profile.depth());
  if (limit_mode(temp)) {
    out.lambda_tilde = Vec::Ones(lam.size());
  } else {
    const Vec x = temp.beta * md2 * lam;
    out.lambda_tilde = x.array() / (1.0 + x.array());
  }
  const Mat& u = out.spectrum.eigenvectors;
  const Mat gy = u.transpose() * gyy * u;
  const Mat lt = out.lambda_tilde.asDiagonal();
  out.rotated = (profile.m2(layer) * profile.width_factor(layer)) *
                (lt * gy * lt / md2 - Mat((out.lambda_tilde.array() * lam.array()).matrix().asDiagonal()));
  return out;
}

PhiMatrix high_temp_expansion(const Mat& k, const Mat& gyy, const TemperatureParams& temp, int order) {
  temp.validate();
  check_pair(k, gyy, "high_temp_expansion");
  if (order < 1 || order > kMaxMomentOrder) {
    fail(ErrorKind::UnsupportedOrder, "high_temp_expansion: order must be in 1.." + std::to_string(kMaxMomentOrder));
  }
  if (limit_mode(temp)) fail(ErrorKind::DivergentSeries, "high_temp_expansion: no expansion at beta = infinity");
  const int p = static_cast<int>(k.rows());
  PhiMatrix out;
  out.entries = Mat::Zero(p, p);
  const double t = temp.beta * temp.sigma_d2;
  if (t == 0.0) return out;
  const Spectrum sp = eigendecompose(symmetrize(k));
  const double radius = sp.eigenvalues.cwiseAbs().maxCoeff();
  if (t * radius >= 1.0) {
    std::ostringstream os;
    os << "high_temp_expansion: beta*sigma_d^2*rho(K) = " << t * radius << " >= 1";
    fail(ErrorKind::DivergentSeries, os.str());
  }
  // Γ⁻¹ = Σ_k t^{k+1}(−K)^k; collect Φ by powers of t.
  std::vector<Mat> powers{Mat::Identity(p, p)};
  for (int j = 1; j < order; ++j) powers.push_back(-k * powers.back());
  double tj = 1.0;
  for (int j = 1; j <= order; ++j) {
    tj *= t;
    Mat term = -powers[j - 1];
    for (int a = 0; a + 2 <= j; ++a) term += powers[a] * gyy * powers[j - 2 - a] / temp.sigma_d2;
    out.entries += tj * term;
  }
  out.entries = symmetrize(out.entries);
  out.gamma = k;
  out.gamma.diagonal().array() += 1.0 / t;
  return out;
}

// ---------------------------------------------------------------- CNN

namespace {

// Readout contraction D(K) = K (Φ ⊗ W) K with W = I/s (vectorization) or J/s² (GAP).
Mat readout_contraction(const Mat& k, const Mat& phi, const Readout& readout, int s) {
  Mat w;
  if (readout.kind == Readout::Kind::Vectorization) {
    w = Mat::Identity(s, s) / s;
  } else {
    w = Mat::Constant(s, s, 1.0 / (static_cast<double>(s) * s));
  }
  Mat kron(phi.rows() * s, phi.cols() * s);
  for (Eigen::Index r = 0; r < phi.rows(); ++r)
    for (Eigen::Index l = 0; l < phi.cols(); ++l) kron.block(r * s, l * s, s, s) = phi(r, l) * w;
  return symmetrize(k * kron * k);
}

}  // namespace

FourIndexKernel cnn_correction_delta(const FourIndexKernel& base, const Mat& gyy, const std::vector<FilterSpec>& filters,
                                     const WidthProfile& profile, const TemperatureParams& temp, int layer,
                                     const Readout& readout, CnnCorrectionMode mode) {
  profile.validate();
  temp.validate();
  base.validate("cnn_correction");
  const int d = profile.depth();
  require(layer >= 1 && layer <= d - 1, "cnn_correction: layer must be in 1..d-1");
  require(static_cast<int>(filters.size()) == d - 1, "cnn_correction: need one filter per hidden layer");
  const int s = base.sites();
  if (readout.kind == Readout::Kind::Projection && !(readout.is_global_average(1e-12) && readout.u.size() == s)) {
    fail(ErrorKind::UnsupportedReadout,
         "cnn_correction: only vectorization and global average pooling readouts are supported (got " +
             readout.name() + ")");
  }
  std::vector<FourIndexKernel> kinf{base};
  for (int l = 1; l <= d - 1; ++l) kinf.push_back(cnn_propagate(kinf.back(), filters[l - 1], profile.variance(l)));
  const Mat kr = readout_kernel(kinf[d - 1], readout);
  require(gyy.rows() == base.p && gyy.cols() == base.p, "cnn_correction: G_yy must be p x p");
  const PhiMatrix phi = phi_operator(kr, gyy, temp);
  const double nd = static_cast<double>(profile.output);
  const double lag = profile.variance_product(layer, d - 1);

  FourIndexKernel out = base;
  if (mode == CnnCorrectionMode::ClosedForm) {
    out.flat = (lag * profile.width_factor(layer)) * readout_contraction(kinf[layer].flat, phi.entries, readout, s);
    return out;
  }
  // U^{(ℓ)} = σ_ℓ⁴ P_ℓ(U^{(ℓ-1)}) + (2/n_ℓ) D(K∞^{(ℓ)}), U^{(0)} = 0.
  FourIndexKernel u = base;
  u.flat.setZero();
  for (int l = 1; l <= layer; ++l) {
    const double v = profile.variance(l);
    u = cnn_propagate(u, filters[l - 1], v * v);
    u.flat += (2.0 / static_cast<double>(profile.width(l))) * readout_contraction(kinf[l].flat, phi.entries, readout, s);
  }
  out.flat = (0.5 * nd * lag) * u.flat;
  return out;
}

FourIndexKernel cnn_correction(const FourIndexKernel& base, const Mat& gyy, const std::vector<FilterSpec>& filters,
                               const WidthProfile& profile, const TemperatureParams& temp, int layer,
                               const Readout& readout, CnnCorrectionMode mode) {
  FourIndexKernel out = cnn_correction_delta(base, gyy, filters, profile, temp, layer, readout, mode);
  out.flat += cnn_linear_gp(base, filters, profile, layer).flat;
  return out;
}

// ---------------------------------------------------------------- single nonlinear layer

namespace {

void check_nonlinear(const Mat& gxx, const Mat& gyy, double sigma1_sq, long n1, long nd, const char* what) {
  check_pair(gxx, gyy, what);
  require(sigma1_sq > 0.0, std::string(what) + ": sigma_1^2 must be positive");
  require(n1 >= 1 && nd >= 1, std::string(what) + ": widths must be >= 1");
}

Mat contract(const Mat& t, const Mat& phi) {
  const Eigen::Index p = phi.rows();
  Mat out(p, p);
  for (Eigen::Index mu = 0; mu < p; ++mu)
    for (Eigen::Index nu = 0; nu < p; ++nu) {
      double acc = 0.0;
      for (Eigen::Index r = 0; r < p; ++r)
        for (Eigen::Index l = 0; l < p; ++l) acc += phi(r, l) * t(mu * p + nu, r * p + l);
      out(mu, nu) = acc;
    }
  return out;
}

}  // namespace

NonlinearCorrection single_nonlinear_correction(const Mat& gxx, const Mat& gyy, double sigma1_sq,
                                                const ActivationSpec& act, const TemperatureParams& temp, long n1,
                                                long nd, const ExpectationOptions& options) {
  check_nonlinear(gxx, gyy, sigma1_sq, n1, nd, "single_nonlinear_correction");
  NonlinearCorrection out;
  out.k_inf = single_layer_gp(gxx, sigma1_sq, act, nullptr, options);
  out.phi = phi_operator(out.k_inf, gyy, temp);
  Mat tse;
  const Mat t = nonlinear_fourpoint_cov(gxx, sigma1_sq, act, &tse, options);
  const double scale = 0.5 * static_cast<double>(nd) / static_cast<double>(n1);
  out.delta = symmetrize(scale * contract(t, out.phi.entries));
  const Eigen::Index p = gxx.rows();
  out.delta_se = Mat::Zero(p, p);
  for (Eigen::Index mu = 0; mu < p; ++mu)
    for (Eigen::Index nu = 0; nu < p; ++nu) {
      double v = 0.0;
      for (Eigen::Index r = 0; r < p; ++r)
        for (Eigen::Index l = 0; l < p; ++l) v += std::pow(out.phi.entries(r, l) * tse(mu * p + nu, r * p + l), 2);
      out.delta_se(mu, nu) = scale * std::sqrt(v);
    }
  out.mean = out.k_inf + out.delta;
  return out;
}

Mat sherman_morrison_gamma_inverse(const Vec& var, const Vec& mean, double beta, double sigma2_sq) {
  require(var.size() == mean.size(), "sherman_morrison: size mismatch");
  require(beta > 0.0 && std::isfinite(beta) && sigma2_sq > 0.0, "sherman_morrison: need finite beta > 0");
  const double b = beta * sigma2_sq;
  const Vec gamma = (1.0 + b * var.array()).matrix();
  const Vec mg = mean.cwiseQuotient(gamma);
  const double denom = 1.0 + b * mean.dot(mg);
  Mat out = -b * (mg * mg.transpose()) / denom;
  out.diagonal() += gamma.cwiseInverse();
  return b * out;
}

NonlinearCorrection single_nonlinear_correction_diagonal(const Mat& gxx, const Mat& gyy, double sigma1_sq,
                                                         const ActivationSpec& act, const TemperatureParams& temp,
                                                         long n1, long nd, const ExpectationOptions& options) {
  check_nonlinear(gxx, gyy, sigma1_sq, n1, nd, "single_nonlinear_correction_diagonal");
  temp.validate();
  require(!temp.low_temperature_limit && temp.beta > 0.0,
          "single_nonlinear_correction_diagonal: needs a finite positive beta");
  const Mat m = diagonal_moments(gxx, sigma1_sq, act, options);
  const Vec mean = m.col(0);
  const Vec var = (m.col(1).array() - mean.array().square()).matrix();
  NonlinearCorrection out;
  out.k_inf = mean * mean.transpose();
  out.k_inf.diagonal() += var;
  const Mat gi = sherman_morrison_gamma_inverse(var, mean, temp.beta, temp.sigma_d2);
  out.phi.gamma = out.k_inf;
  out.phi.gamma.diagonal().array() += 1.0 / (temp.beta * temp.sigma_d2);
  out.phi.entries = symmetrize(gi * gyy * gi / temp.sigma_d2 - gi);
  const Mat t = nonlinear_fourpoint_cov_diagonal(gxx, sigma1_sq, act, options);
  out.delta = symmetrize((0.5 * static_cast<double>(nd) / static_cast<double>(n1)) * contract(t, out.phi.entries));
  out.delta_se = Mat::Zero(gxx.rows(), gxx.cols());
  out.mean = out.k_inf + out.delta;
  return out;
}

// ---------------------------------------------------------------- posterior covariance

ThirdCumulant linear_kernel_third_cumulant(const Mat& gxx, double sigma1_sq, long n1) {
  const int p = static_cast<int>(gxx.rows());
  const Mat c = sigma1_sq * gxx;
  ThirdCumulant out;
  out.p = p;
  out.slices.assign(static_cast<std::size_t>(p) * p, Mat(p * p, p * p));
  for (int mu = 0; mu < p; ++mu)
    for (int nu = 0; nu < p; ++nu) {
      Mat& s = out.slices[mu * p + nu];
      for (int i = 0; i < p * p; ++i)
        for (int j = i; j < p * p; ++j)
          s(i, j) = s(j, i) = wishart_third_cumulant(c, n1, i / p, i % p, j / p, j % p, mu, nu);
    }
  return out;
}

Mat linear_kernel_covariance_flat(const Mat& gxx, double sigma1_sq, long n1) {
  require(n1 >= 1, "linear_kernel_covariance: n1 must be >= 1");
  return wick_tensor(sigma1_sq * gxx) / static_cast<double>(n1);
}

Mat posterior_covariance_correction(const Mat& cov_oo, const ThirdCumulant& k3, const PhiMatrix& phi, long nd) {
  if (k3.empty()) fail(ErrorKind::InvalidArgument, "posterior_covariance_correction: third cumulant is missing");
  const Eigen::Index p = phi.entries.rows();
  require(static_cast<Eigen::Index>(k3.slices.size()) == p * p, "posterior_covariance_correction: need p^2 slices");
  require(cov_oo.rows() == cov_oo.cols(), "posterior_covariance_correction: covariance must be square");
  Mat out = cov_oo;
  for (Eigen::Index mu = 0; mu < p; ++mu)
    for (Eigen::Index nu = 0; nu < p; ++nu) {
      const Mat& s = k3.slices[mu * p + nu];
      require(s.rows() == cov_oo.rows() && s.cols() == cov_oo.cols(),
              "posterior_covariance_correction: slice shape mismatch");
      out += (0.5 * static_cast<double>(nd) * phi.entries(mu, nu)) * s;
    }
  return symmetrize(out);
}

}  // namespace fwbnn
