#include "fwbnn/priorcumulants.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace fwbnn;

namespace {

Mat random_matrix(int r, int c, std::uint64_t seed) {
  Philox rng(seed, 0);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Mat gram(const Mat& x) { return x * x.transpose() / static_cast<double>(x.cols()); }

double max_z(const Mat& a, const Mat& b, const Mat& se) {
  double z = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) z = std::max(z, std::abs(a.data()[i] - b.data()[i]) / std::max(se.data()[i], 1e-300));
  return z;
}

NetworkConfig linear_mlp(int n0, std::vector<long> hidden, std::vector<double> var) {
  NetworkConfig c;
  c.arch = Architecture::MlpLinear;
  c.input_dim = n0;
  c.profile.hidden = std::move(hidden);
  c.profile.output = 1;
  c.profile.variances = std::move(var);
  return c;
}

}  // namespace

TEST(MlpKernelCovariance, SingleSample) {
  Mat g(1, 1);
  g << 0.7;
  WidthProfile p;
  p.hidden = {9};
  p.output = 1;
  p.variances = {1.6, 1.0};
  const Mat c = mlp_kernel_covariance(g, p, 1);
  EXPECT_NEAR(c(0, 0), 2.0 / 9.0 * 1.6 * 1.6 * 0.49, 1e-15);
}

TEST(MlpKernelCovariance, InfiniteWidthVanishes) {
  const Mat g = gram(random_matrix(3, 4, 1));
  const WidthProfile p = WidthProfile::uniform(3, 1000000000000L, 1);
  EXPECT_LT(mlp_kernel_covariance(g, p, 2).norm(), 1e-10);
}

TEST(MlpKernelCovariance, Symmetries) {
  const int p = 3;
  const Mat g = gram(random_matrix(p, 5, 2));
  WidthProfile prof;
  prof.hidden = {7, 11, 5};
  prof.output = 1;
  prof.variances = {1.2, 0.9, 1.4, 1.0};
  for (int lag = 0; lag <= 1; ++lag) {
    const Mat c = mlp_kernel_covariance(g, prof, 2, lag);
    for (int mu = 0; mu < p; ++mu)
      for (int nu = 0; nu < p; ++nu)
        for (int rho = 0; rho < p; ++rho)
          for (int lam = 0; lam < p; ++lam) {
            const double v = c(mu * p + nu, rho * p + lam);
            EXPECT_DOUBLE_EQ(v, c(nu * p + mu, rho * p + lam));
            EXPECT_DOUBLE_EQ(v, c(mu * p + nu, lam * p + rho));
            if (lag == 0) {
              EXPECT_DOUBLE_EQ(v, c(rho * p + lam, mu * p + nu));
            }
          }
  }
}

TEST(MlpKernelCovariance, LagPrefactorAndWidthSum) {
  const Mat g = gram(random_matrix(2, 3, 3));
  WidthProfile prof;
  prof.hidden = {4, 8, 8};
  prof.output = 1;
  prof.variances = {1.5, 2.0, 0.5, 1.0};
  const Mat base = wick_tensor(prof.m2(2) * g);
  EXPECT_LE((mlp_kernel_covariance(g, prof, 2, 0) - (0.25 + 0.125) * base).norm(), 1e-14 * base.norm());
  EXPECT_LE((mlp_kernel_covariance(g, prof, 2, 1) - 0.5 * (0.25 + 0.125) * base).norm(), 1e-14 * base.norm());
  EXPECT_THROW(mlp_kernel_covariance(g, prof, 3, 1), Error);
  EXPECT_THROW(mlp_kernel_covariance(g, prof, 0, 0), Error);
}

TEST(MlpKernelCovariance, DoublingHalvesBitExactly) {
  const Mat g = gram(random_matrix(3, 4, 4));
  WidthProfile prof;
  prof.hidden = {6, 10};
  prof.output = 1;
  prof.variances = {1.1, 0.8, 1.0};
  const Mat a = mlp_kernel_covariance(g, prof, 2), b = mlp_kernel_covariance(g, prof.scaled(2), 2);
  EXPECT_EQ(a, 2.0 * b);
}

TEST(MlpKernelCovariance, PositiveOnSymmetricMatrices) {
  const int p = 4;
  const Mat g = gram(random_matrix(p, 6, 5));
  const Mat c = mlp_kernel_covariance(g, WidthProfile::uniform(3, 20, 1), 2);
  for (int t = 0; t < 10; ++t) {
    Mat s = random_matrix(p, p, 100 + t);
    s = (s + s.transpose()).eval();
    const Vec v = Eigen::Map<const Vec>(s.data(), p * p);
    EXPECT_GE(v.dot(c * v), 0.0);
  }
}

TEST(MlpKernelCovariance, ExactMinusLeadingIsSecondOrder) {
  const Mat g = gram(random_matrix(3, 6, 6));
  std::vector<std::pair<double, double>> pts;
  for (long n : {100L, 200L, 400L, 800L}) {
    const WidthProfile prof = WidthProfile::uniform(3, n, 1, 1.1);
    pts.emplace_back(std::log(n),
                     std::log((mlp_kernel_covariance_exact(g, prof, 2) - mlp_kernel_covariance(g, prof, 2)).norm()));
  }
  const double slope = (pts.back().second - pts.front().second) / (pts.back().first - pts.front().first);
  EXPECT_NEAR(slope, -2.0, 0.05);
  // One layer: the leading form is exact.
  const WidthProfile one = WidthProfile::uniform(2, 13, 1, 1.3);
  EXPECT_LE((mlp_kernel_covariance_exact(g, one, 1) - mlp_kernel_covariance(g, one, 1)).norm(),
            1e-13 * mlp_kernel_covariance(g, one, 1).norm());
}

TEST(PriorOracle, MlpMeanAndCovariance) {
  const Mat x = random_matrix(3, 6, 7);
  const NetworkConfig c = linear_mlp(6, {800, 800}, {1.2, 0.9, 1.0});
  const PriorCumulants o = prior_cumulant_oracle(c, x, 100000);
  const Mat g = gram(x);
  for (int l = 1; l <= 2; ++l) {
    EXPECT_LT(max_z(o.mean[l - 1], c.profile.m2(l) * g, o.mean_se[l - 1]), 4.0);
    EXPECT_LT(max_z(o.layer_covariance(l, l), mlp_kernel_covariance(g, c.profile, l), o.layer_covariance_se(l, l)), 4.5);
  }
  EXPECT_LT(max_z(o.layer_covariance(1, 2), mlp_kernel_covariance(g, c.profile, 1, 1), o.layer_covariance_se(1, 2)), 4.5);
}

TEST(PriorOracle, DoublingWidthHalvesCovariance) {
  const Mat x = random_matrix(2, 4, 8);
  const PriorCumulants a = prior_cumulant_oracle(linear_mlp(4, {50, 50}, {1, 1, 1}), x, 40000);
  const PriorCumulants b = prior_cumulant_oracle(linear_mlp(4, {100, 100}, {1, 1, 1}), x, 40000);
  EXPECT_NEAR(a.layer_covariance(2, 2).norm() / b.layer_covariance(2, 2).norm(), 2.0, 0.1);
}

TEST(PriorOracle, ZeroVariancePrior) {
  const Mat x = random_matrix(2, 3, 9);
  const PriorCumulants o = prior_cumulant_oracle(linear_mlp(3, {10}, {0.0, 1.0}), x, 1000);
  EXPECT_LT(o.mean[0].norm(), 1e-10);
}

TEST(PriorOracle, SymmetricTestMatrixQuadraticForm) {
  const int p = 3;
  const Mat x = random_matrix(p, 4, 10);
  const PriorCumulants o = prior_cumulant_oracle(linear_mlp(4, {20, 20}, {1, 1, 1}), x, 20000);
  const Mat c = o.layer_covariance(2, 2), se = o.layer_covariance_se(2, 2);
  for (int t = 0; t < 5; ++t) {
    Mat s = random_matrix(p, p, 200 + t);
    s = (s + s.transpose()).eval();
    const Vec v = Eigen::Map<const Vec>(s.data(), p * p);
    EXPECT_GE(v.dot(c * v), -5.0 * v.cwiseAbs().dot(se * v.cwiseAbs()));
  }
}

TEST(CnnKernelCovariance, SingleSiteEqualsMlp) {
  const Mat x = random_matrix(3, 4, 11);
  SpatialShape shape;
  WidthProfile prof;
  prof.hidden = {6, 9};
  prof.output = 1;
  prof.variances = {1.3, 0.7, 1.0};
  const std::vector<FilterSpec> f(2, FilterSpec::uniform(1, 0));
  for (int l = 1; l <= 2; ++l) {
    const Mat a = CnnKernelCovariance(cnn_input_gram(x, 4, shape), f, prof, l).materialize();
    const Mat b = mlp_kernel_covariance(gram(x), prof, l);
    EXPECT_LE((a - b).norm(), 1e-12 * b.norm());
  }
}

TEST(CnnKernelCovariance, ConstantInputs) {
  const int p = 2, ch = 3, s = 4;
  const Mat z = random_matrix(p, ch, 12);
  Mat x(p, ch * s);
  for (int c = 0; c < ch; ++c)
    for (int a = 0; a < s; ++a) x.col(c * s + a) = z.col(c);
  SpatialShape shape;
  shape.extents = {s};
  const WidthProfile prof = WidthProfile::uniform(3, 8, 1, 1.2);
  const std::vector<FilterSpec> f(2, FilterSpec::uniform(1, 1));
  const CnnKernelCovariance cov(cnn_input_gram(x, ch, shape), f, prof, 2);
  const Mat flat = mlp_kernel_covariance(gram(z), prof, 2);
  for (int mu = 0; mu < p; ++mu)
    for (int nu = 0; nu < p; ++nu)
      for (int rho = 0; rho < p; ++rho)
        for (int lam = 0; lam < p; ++lam) {
          const Mat blk = cov.block(mu, nu, rho, lam);
          EXPECT_LE((blk.array() - flat(mu * p + nu, rho * p + lam)).abs().maxCoeff(), 1e-13);
        }
}

TEST(CnnKernelCovariance, OracleOneDimensional) {
  const int p = 2, ch = 2, s = 4;
  NetworkConfig c;
  c.arch = Architecture::CnnLinear1d;
  c.input_dim = ch;
  c.shape.extents = {s};
  c.profile.hidden = {400, 400};
  c.profile.output = 1;
  c.profile.variances = {1.0, 1.1, 1.0};
  FilterSpec f;
  f.dims = 1;
  f.halfwidth = 1;
  f.weights = {0.5, 0.3, 0.2};
  c.filters = {f, f};
  const Mat x = random_matrix(p, ch * s, 13);
  const PriorCumulants o = prior_cumulant_oracle(c, x, 100000);
  const FourIndexKernel base = cnn_input_gram(x, ch, c.shape);
  const int q = p * s;
  for (int l = 1; l <= 2; ++l) {
    const Mat m = CnnKernelCovariance(base, c.filters, c.profile, l).materialize();
    double worst = 0.0;
    // Oracle entries are column-major over the flat kernel.
    for (int i = 0; i < q; ++i)
      for (int j = 0; j < q; ++j)
        for (int k = 0; k < q; ++k)
          for (int L = 0; L < q; ++L) {
            const Eigen::Index r = o.offsets[l - 1] + j * q + i, cc = o.offsets[l - 1] + L * q + k;
            worst = std::max(worst, std::abs(o.covariance(r, cc) - m(i * q + j, k * q + L)) / o.covariance_se(r, cc));
          }
    EXPECT_LT(worst, 5.0) << l;
  }
}

TEST(CnnKernelCovariance, ResourceGuard) {
  SpatialShape shape;
  shape.extents = {20, 20};
  const Mat x = random_matrix(1, 400, 14);
  try {
    CnnKernelCovariance(cnn_input_gram(x, 1, shape), std::vector<FilterSpec>(1, FilterSpec::uniform(2, 0)),
                        WidthProfile::uniform(2, 4, 1), 1);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ResourceLimit);
  }
}

TEST(NonlinearFourpoint, IdentityReducesToLinear) {
  const Mat g = gram(random_matrix(3, 5, 15));
  const WidthProfile prof = WidthProfile::uniform(2, 17, 1, 1.4);
  const Mat a = nonlinear_fourpoint_cov(g, 1.4, ActivationSpec::identity());
  const Mat b = 17.0 * mlp_kernel_covariance(g, prof, 1);
  EXPECT_LE((a - b).norm(), 1e-12 * b.norm());
}

TEST(NonlinearFourpoint, QuadraticUnitVariance) {
  const double s2 = 1.3;
  const Mat c = nonlinear_fourpoint_cov(Mat::Identity(2, 2), s2, ActivationSpec::polynomial({0, 0, 1}));
  EXPECT_NEAR(c(0, 0), 96.0 * std::pow(s2, 4), 1e-11);
  EXPECT_NEAR(c(3, 3), 96.0 * std::pow(s2, 4), 1e-11);
}

TEST(NonlinearFourpoint, DiagonalPathMatchesGeneric) {
  Mat g = Mat::Zero(3, 3);
  g.diagonal() << 0.8, 1.3, 0.5;
  for (const ActivationSpec& a : {ActivationSpec::polynomial({0.2, 0, 1}), ActivationSpec::polynomial({0, 1, 0, 0.5})}) {
    const Mat x = nonlinear_fourpoint_cov(g, 1.1, a), y = nonlinear_fourpoint_cov_diagonal(g, 1.1, a);
    EXPECT_LE((x - y).norm(), 1e-12 * x.norm());
  }
  EXPECT_THROW(nonlinear_fourpoint_cov_diagonal(gram(random_matrix(3, 4, 16)), 1.0, ActivationSpec::identity()), Error);
}

TEST(NonlinearFourpoint, ErfMatchesCrudeMonteCarlo) {
  const int p = 3;
  const Mat g = gram(random_matrix(p, 5, 17));
  Mat se;
  const Mat c = nonlinear_fourpoint_cov(g, 1.0, ActivationSpec::erf(), &se);
  const Mat l = Eigen::LLT<Mat>(g).matrixL();
  Philox rng(18, 0);
  const long n = 10000000;
  // Accumulate products of φ for all unordered index quadruples via the 9-vector φ⊗φ.
  Mat s2 = Mat::Zero(p * p, p * p), s4 = Mat::Zero(p * p, p * p);
  Vec s1 = Vec::Zero(p * p);
  Eigen::Vector3d z;
  Eigen::Matrix<double, 9, 1> v;
  for (long i = 0; i < n; ++i) {
    for (int a = 0; a < p; ++a) z(a) = rng.normal();
    const Eigen::Vector3d h = l * z;
    const Eigen::Vector3d f(std::erf(h(0)), std::erf(h(1)), std::erf(h(2)));
    for (int a = 0; a < p; ++a)
      for (int b = 0; b < p; ++b) v(a * p + b) = f(a) * f(b);
    s1 += v;
    const auto o = v * v.transpose();
    s2 += o;
    s4 += o.cwiseProduct(o);
  }
  const Mat e4 = s2 / n;
  const Vec k = s1 / n;
  const Mat mc = e4 - k * k.transpose();
  const Mat mse = ((s4 / n - e4.cwiseProduct(e4)) / n).cwiseSqrt();
  const Mat comb = (mse.cwiseProduct(mse) + se.cwiseProduct(se)).cwiseSqrt();
  EXPECT_LT(max_z(c, mc, comb), 4.0);
}

TEST(WishartThirdCumulant, SingleSample) {
  Mat c(1, 1);
  c << 0.6;
  EXPECT_NEAR(wishart_third_cumulant(c, 7, 0, 0, 0, 0, 0, 0), 8.0 * std::pow(0.6, 3) / 49.0, 1e-15);
}
