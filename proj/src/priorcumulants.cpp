#include "fwbnn/priorcumulants.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <thread>

namespace fwbnn {

Mat wick_tensor(const Mat& k) {
  const int p = static_cast<int>(k.rows());
  Mat t(p * p, p * p);
  for (int mu = 0; mu < p; ++mu)
    for (int nu = 0; nu < p; ++nu)
      for (int rho = 0; rho < p; ++rho)
        for (int lam = 0; lam < p; ++lam)
          t(mu * p + nu, rho * p + lam) = k(mu, rho) * k(nu, lam) + k(mu, lam) * k(nu, rho);
  return t;
}

namespace {

void check_layers(const WidthProfile& profile, int layer, int lag, const char* what) {
  profile.validate();
  require(layer >= 1 && lag >= 0 && layer + lag <= profile.depth() - 1,
          std::string(what) + ": need 1 <= layer and layer + lag <= d-1");
}

}  // namespace

Mat mlp_kernel_covariance(const Mat& gxx, const WidthProfile& profile, int layer, int lag) {
  check_layers(profile, layer, lag, "mlp_kernel_covariance");
  const Mat k = profile.m2(layer) * gxx;
  return (profile.variance_product(layer, layer + lag) * profile.inverse_width_sum(layer)) * wick_tensor(k);
}

Mat mlp_kernel_covariance_exact(const Mat& gxx, const WidthProfile& profile, int layer, int lag) {
  check_layers(profile, layer, lag, "mlp_kernel_covariance_exact");
  const int p = static_cast<int>(gxx.rows());
  const int q = p * p;
  // Second moment M_{μν,ρλ} = E[K_{μν}K_{ρλ}], starting from G_xx ⊗ G_xx.
  Mat vg(q, 1);
  for (int mu = 0; mu < p; ++mu)
    for (int nu = 0; nu < p; ++nu) vg(mu * p + nu) = gxx(mu, nu);
  Mat m = vg * vg.transpose();
  for (int l = 1; l <= layer; ++l) {
    const double s4 = profile.variance(l) * profile.variance(l);
    const double inv_n = 1.0 / static_cast<double>(profile.width(l));
    Mat next(q, q);
    for (int mu = 0; mu < p; ++mu)
      for (int nu = 0; nu < p; ++nu)
        for (int rho = 0; rho < p; ++rho)
          for (int lam = 0; lam < p; ++lam)
            next(mu * p + nu, rho * p + lam) =
                s4 * (m(mu * p + nu, rho * p + lam) +
                      inv_n * (m(mu * p + rho, nu * p + lam) + m(mu * p + lam, nu * p + rho)));
    m = std::move(next);
  }
  const Mat mean = profile.m2(layer) * vg;
  return profile.variance_product(layer, layer + lag) * (m - mean * mean.transpose());
}

// ---------------------------------------------------------------- CNN

namespace {

std::vector<double> delta_filter(int s) {
  std::vector<double> w(s, 0.0);
  w[0] = 1.0;
  return w;
}

std::vector<double> dense_filter(const FilterSpec& f, const SpatialShape& shape) {
  std::vector<double> w(shape.sites(), 0.0);
  for (int t = 0; t < f.taps(); ++t) w[shape.shifted(0, f.offset(t))] += f.weights[t];
  return w;
}

std::vector<double> convolve(const std::vector<double>& x, const std::vector<double>& y, const std::vector<int>& add,
                             int s) {
  std::vector<double> z(s, 0.0);
  for (int a = 0; a < s; ++a) {
    if (x[a] == 0.0) continue;
    for (int b = 0; b < s; ++b)
      if (y[b] != 0.0) z[add[a * s + b]] += x[a] * y[b];
  }
  return z;
}

}  // namespace

CnnKernelCovariance::CnnKernelCovariance(const FourIndexKernel& base, const std::vector<FilterSpec>& filters,
                                         const WidthProfile& profile, int layer, int lag, CnnCovarianceForm form,
                                         int cap) {
  check_layers(profile, layer, lag, "cnn_kernel_covariance");
  require(static_cast<int>(filters.size()) >= layer + lag, "cnn_kernel_covariance: need one filter per layer");
  p_ = base.p;
  s_ = base.sites();
  if (p_ * s_ > cap) {
    fail(ErrorKind::ResourceLimit, "cnn_kernel_covariance: p*s = " + std::to_string(p_ * s_) + " exceeds the cap of " +
                                       std::to_string(cap));
  }
  add_.resize(static_cast<std::size_t>(s_) * s_);
  for (int a = 0; a < s_; ++a)
    for (int b = 0; b < s_; ++b) add_[a * s_ + b] = base.shape.shifted(a, base.shape.coords(b));

  std::vector<std::vector<double>> dense;
  for (const FilterSpec& f : filters) dense.push_back(dense_filter(f, base.shape));
  auto composite = [&](int from, int to) {  // layers from+1..to
    std::vector<double> w = delta_filter(s_);
    for (int l = from + 1; l <= to; ++l) w = convolve(w, dense[l - 1], add_, s_);
    return w;
  };
  std::vector<Mat> kinf;  // K∞^{(ℓ')}, ℓ' = 1..layer
  FourIndexKernel k = base;
  for (int l = 1; l <= layer; ++l) {
    k = cnn_propagate(k, filters[l - 1], profile.variance(l));
    kinf.push_back(k.flat);
  }
  const double lag_var = profile.variance_product(layer, layer + lag);
  if (form == CnnCovarianceForm::ClosedForm) {
    terms_.push_back({lag_var * profile.inverse_width_sum(layer), kinf.back(), delta_filter(s_),
                      composite(layer, layer + lag)});
    return;
  }
  for (int lp = 1; lp <= layer; ++lp) {
    const double va = profile.variance_product(lp, layer);
    const double coef = va * va * lag_var / static_cast<double>(profile.width(lp));
    terms_.push_back({coef, kinf[lp - 1], composite(lp, layer), composite(lp, layer + lag)});
  }
}

double CnnKernelCovariance::operator()(int mu, int nu, int a, int b, int rho, int lam, int c, int d) const {
  const int s = s_;
  double total = 0.0;
  for (const Term& t : terms_) {
    double acc = 0.0;
    for (int e = 0; e < s; ++e) {
      if (t.wa[e] == 0.0) continue;
      const int ae = add_[a * s + e], be = add_[b * s + e];
      for (int f = 0; f < s; ++f) {
        if (t.wb[f] == 0.0) continue;
        const int cf = add_[c * s + f], df = add_[d * s + f];
        acc += t.wa[e] * t.wb[f] *
               (t.k(mu * s + ae, rho * s + cf) * t.k(nu * s + be, lam * s + df) +
                t.k(mu * s + ae, lam * s + df) * t.k(nu * s + be, rho * s + cf));
      }
    }
    total += t.coef * acc;
  }
  return total;
}

Mat CnnKernelCovariance::block(int mu, int nu, int rho, int lam) const {
  require(mu >= 0 && mu < p_ && nu >= 0 && nu < p_ && rho >= 0 && rho < p_ && lam >= 0 && lam < p_,
          "cnn_kernel_covariance: sample index out of range");
  Mat out(s_ * s_, s_ * s_);
  for (int a = 0; a < s_; ++a)
    for (int b = 0; b < s_; ++b)
      for (int c = 0; c < s_; ++c)
        for (int d = 0; d < s_; ++d) out(a * s_ + b, c * s_ + d) = (*this)(mu, nu, a, b, rho, lam, c, d);
  return out;
}

Mat CnnKernelCovariance::materialize() const {
  const int q = p_ * s_;
  if (q * q > 4096) fail(ErrorKind::ResourceLimit, "cnn_kernel_covariance: materialized tensor too large");
  Mat out(q * q, q * q);
  for (int mu = 0; mu < p_; ++mu)
    for (int a = 0; a < s_; ++a)
      for (int nu = 0; nu < p_; ++nu)
        for (int b = 0; b < s_; ++b)
          for (int rho = 0; rho < p_; ++rho)
            for (int c = 0; c < s_; ++c)
              for (int lam = 0; lam < p_; ++lam)
                for (int d = 0; d < s_; ++d)
                  out((mu * s_ + a) * q + nu * s_ + b, (rho * s_ + c) * q + lam * s_ + d) =
                      (*this)(mu, nu, a, b, rho, lam, c, d);
  return out;
}

// ---------------------------------------------------------------- single nonlinear layer

Mat nonlinear_fourpoint_cov(const Mat& gxx, double sigma1_sq, const ActivationSpec& act, Mat* se,
                            const ExpectationOptions& options) {
  require(gxx.rows() == gxx.cols(), "nonlinear_fourpoint_cov: G_xx must be square");
  require(sigma1_sq > 0.0, "nonlinear_fourpoint_cov: σ₁² must be positive");
  const int p = static_cast<int>(gxx.rows());
  const Mat cov = sigma1_sq * gxx;
  Mat kse;
  const Mat k = single_layer_gp(gxx, sigma1_sq, act, &kse, options);
  Mat t(p * p, p * p);
  if (se) *se = Mat::Zero(p * p, p * p);
  for (int mu = 0; mu < p; ++mu)
    for (int nu = mu; nu < p; ++nu)
      for (int rho = 0; rho < p; ++rho)
        for (int lam = rho; lam < p; ++lam) {
          if (rho * p + lam < mu * p + nu) continue;
          const Estimate e = activation_moment(cov, {mu, nu, rho, lam}, act, options);
          const double v = e.value - k(mu, nu) * k(rho, lam);
          double err = 0.0;
          if (se) {
            err = std::sqrt(e.se * e.se + std::pow(k(rho, lam) * kse(mu, nu), 2) +
                            std::pow(k(mu, nu) * kse(rho, lam), 2));
          }
          const int rows[2] = {mu * p + nu, nu * p + mu};
          const int cols[2] = {rho * p + lam, lam * p + rho};
          for (int r : rows)
            for (int c : cols) {
              t(r, c) = t(c, r) = v;
              if (se) (*se)(r, c) = (*se)(c, r) = err;
            }
        }
  return t;
}

Mat diagonal_moments(const Mat& gxx, double sigma1_sq, const ActivationSpec& act, const ExpectationOptions& options) {
  const int p = static_cast<int>(gxx.rows());
  Mat m(p, 4);
  for (int mu = 0; mu < p; ++mu) {
    const Mat var = Mat::Constant(1, 1, sigma1_sq * gxx(mu, mu));
    std::vector<int> idx;
    for (int k = 1; k <= 4; ++k) {
      idx.push_back(0);
      m(mu, k - 1) = (act.is_odd() && k % 2 == 1) ? 0.0 : activation_moment(var, idx, act, options).value;
    }
  }
  return m;
}

Mat nonlinear_fourpoint_cov_diagonal(const Mat& gxx, double sigma1_sq, const ActivationSpec& act,
                                     const ExpectationOptions& options) {
  require(gxx.rows() == gxx.cols(), "nonlinear_fourpoint_cov_diagonal: G_xx must be square");
  const int p = static_cast<int>(gxx.rows());
  const Mat offdiag = gxx - Mat(gxx.diagonal().asDiagonal());
  require(offdiag.cwiseAbs().maxCoeff() == 0.0, "nonlinear_fourpoint_cov_diagonal: G_xx must be diagonal");
  const Mat m = diagonal_moments(gxx, sigma1_sq, act, options);
  // E[Π φ] over a multiset factors into per-sample moments.
  auto moment = [&](std::initializer_list<int> idx) {
    int counts[64] = {0};
    std::vector<int> seen;
    for (int i : idx) {
      if (counts[i % 64]++ == 0) seen.push_back(i);
    }
    double v = 1.0;
    for (int i : seen) v *= m(i, counts[i % 64] - 1);
    return v;
  };
  require(p <= 64, "nonlinear_fourpoint_cov_diagonal: p must be <= 64");
  Mat t(p * p, p * p);
  for (int mu = 0; mu < p; ++mu)
    for (int nu = 0; nu < p; ++nu) {
      const double kmn = moment({mu, nu});
      for (int rho = 0; rho < p; ++rho)
        for (int lam = 0; lam < p; ++lam)
          t(mu * p + nu, rho * p + lam) = moment({mu, nu, rho, lam}) - kmn * moment({rho, lam});
    }
  return t;
}

double wishart_third_cumulant(const Mat& c, long n, int a, int b, int cc, int d, int e, int f) {
  require(n >= 1, "wishart_third_cumulant: n must be >= 1");
  const double x = isserlis_moment(c, {a, b}), y = isserlis_moment(c, {cc, d}), z = isserlis_moment(c, {e, f});
  const double k3 = isserlis_moment(c, {a, b, cc, d, e, f}) - x * isserlis_moment(c, {cc, d, e, f}) -
                    y * isserlis_moment(c, {a, b, e, f}) - z * isserlis_moment(c, {a, b, cc, d}) + 2.0 * x * y * z;
  return k3 / (static_cast<double>(n) * static_cast<double>(n));
}

// ---------------------------------------------------------------- oracle

Mat PriorCumulants::layer_covariance(int l1, int l2) const {
  require(l1 >= 1 && l2 >= 1 && l1 <= static_cast<int>(mean.size()) && l2 <= static_cast<int>(mean.size()),
          "PriorCumulants: layer out of range");
  const int p1 = static_cast<int>(mean[l1 - 1].rows()), p2 = static_cast<int>(mean[l2 - 1].rows());
  Mat t(p1 * p1, p2 * p2);
  for (int mu = 0; mu < p1; ++mu)
    for (int nu = 0; nu < p1; ++nu)
      for (int rho = 0; rho < p2; ++rho)
        for (int lam = 0; lam < p2; ++lam)
          t(mu * p1 + nu, rho * p2 + lam) = covariance(offsets[l1 - 1] + nu * p1 + mu, offsets[l2 - 1] + lam * p2 + rho);
  return t;
}

Mat PriorCumulants::layer_covariance_se(int l1, int l2) const {
  const int p1 = static_cast<int>(mean[l1 - 1].rows()), p2 = static_cast<int>(mean[l2 - 1].rows());
  Mat t(p1 * p1, p2 * p2);
  for (int mu = 0; mu < p1; ++mu)
    for (int nu = 0; nu < p1; ++nu)
      for (int rho = 0; rho < p2; ++rho)
        for (int lam = 0; lam < p2; ++lam)
          t(mu * p1 + nu, rho * p2 + lam) =
              covariance_se(offsets[l1 - 1] + nu * p1 + mu, offsets[l2 - 1] + lam * p2 + rho);
  return t;
}

PriorCumulants prior_cumulant_oracle(const NetworkConfig& config, const Mat& x, long draws,
                                     const OracleOptions& options) {
  require(draws >= 1000, "prior_cumulant_oracle: need at least 1000 draws");
  require(options.block >= 1 && options.groups >= 2, "prior_cumulant_oracle: bad block/group settings");
  // Floor degenerate variances so the prior stays well defined.
  NetworkConfig cfg = config;
  for (double& v : cfg.profile.variances) v = std::max(v, 1e-12);
  const PriorKernelSampler sampler(cfg, x, options.method);

  auto draw = [&](long i, Vec& out) {
    const long base = options.antithetic ? i / 2 : i;
    Philox rng(options.seed, static_cast<std::uint64_t>(base));
    const std::vector<Mat> ks = sampler.draw(rng, options.antithetic && i % 2 == 1);
    Eigen::Index off = 0;
    for (const Mat& k : ks) {
      std::copy(k.data(), k.data() + k.size(), out.data() + off);
      off += k.size();
    }
  };

  PriorCumulants res;
  Eigen::Index dim = 0;
  {
    Philox rng(0, 0);
    for (const Mat& k : sampler.draw(rng)) {
      res.offsets.push_back(dim);
      dim += k.size();
      res.mean.push_back(Mat::Zero(k.rows(), k.cols()));
    }
  }
  Vec ref(dim);
  draw(0, ref);

  const long nblocks = (draws + options.block - 1) / options.block;
  std::vector<Vec> s1(nblocks);
  std::vector<Mat> s2(nblocks);
  std::vector<std::exception_ptr> errors(nblocks);
  std::atomic<long> next{0};
  auto worker = [&]() {
    Vec v(dim);
    for (long b = next++; b < nblocks; b = next++) {
      try {
        Vec a = Vec::Zero(dim);
        Mat q = Mat::Zero(dim, dim);
        const long lo = b * options.block, hi = std::min(draws, lo + options.block);
        for (long i = lo; i < hi; ++i) {
          draw(i, v);
          v -= ref;
          a += v;
          q.selfadjointView<Eigen::Lower>().rankUpdate(v);
        }
        s1[b] = std::move(a);
        s2[b] = q.selfadjointView<Eigen::Lower>();
      } catch (...) {
        errors[b] = std::current_exception();
      }
    }
  };
  const int lanes = static_cast<int>(std::clamp<long>(std::thread::hardware_concurrency(), 1, nblocks));
  if (lanes == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < lanes; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  const int groups = static_cast<int>(std::min<long>(options.groups, nblocks));
  std::vector<Vec> g1(groups, Vec::Zero(dim));
  std::vector<Mat> g2(groups, Mat::Zero(dim, dim));
  std::vector<long> gn(groups, 0);
  Vec t1 = Vec::Zero(dim);
  Mat t2 = Mat::Zero(dim, dim);
  for (long b = 0; b < nblocks; ++b) {
    const int g = static_cast<int>(b * groups / nblocks);
    g1[g] += s1[b];
    g2[g] += s2[b];
    gn[g] += std::min(draws, (b + 1) * options.block) - b * options.block;
    t1 += s1[b];
    t2 += s2[b];
  }
  const double nd = static_cast<double>(draws);
  const Vec m = t1 / nd;
  res.covariance = (t2 - nd * m * m.transpose()) / (nd - 1.0);
  Mat gsum = Mat::Zero(dim, dim), gsq = Mat::Zero(dim, dim);
  for (int g = 0; g < groups; ++g) {
    const double n = static_cast<double>(gn[g]);
    const Vec mg = g1[g] / n;
    const Mat cg = (g2[g] - n * mg * mg.transpose()) / (n - 1.0);
    gsum += cg;
    gsq += cg.cwiseProduct(cg);
  }
  const Mat gm = gsum / groups;
  res.covariance_se =
      ((gsq / groups - gm.cwiseProduct(gm)).cwiseMax(0.0) * (static_cast<double>(groups) / (groups - 1)) / groups)
          .cwiseSqrt();
  const Vec mean = m + ref;
  const Vec mse = (res.covariance.diagonal().cwiseMax(0.0) / nd).cwiseSqrt();
  res.mean_se.resize(res.mean.size());
  for (std::size_t l = 0; l < res.mean.size(); ++l) {
    const Eigen::Index r = res.mean[l].rows(), c = res.mean[l].cols();
    res.mean[l] = Eigen::Map<const Mat>(mean.data() + res.offsets[l], r, c);
    res.mean_se[l] = Eigen::Map<const Mat>(mse.data() + res.offsets[l], r, c);
  }
  res.draws = draws;
  return res;
}

}  // namespace fwbnn
