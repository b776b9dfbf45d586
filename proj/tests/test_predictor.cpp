#include "fwbnn/predictor.hpp"

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

double rel(const Mat& a, const Mat& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

WidthProfile profile(long n, long nd) {
  WidthProfile p;
  p.hidden = {n, n};
  p.output = nd;
  p.variances = {1.1, 0.9, 1.2};
  return p;
}

}  // namespace

TEST(PredictorMean, GpTermIsKernelRidge) {
  const Mat x = random_matrix(6, 8, 1), xh = random_matrix(4, 8, 2), y = random_matrix(6, 2, 3);
  const WidthProfile prof = profile(30, 2);
  const double beta = 3.0;
  const PredictorMean m = predictor_mean(PredictorGrams::from_data(x, y, xh), prof, beta);
  const double m2 = 1.1 * 0.9;
  Mat gamma = m2 * gram(x);
  gamma.diagonal().array() += 1.0 / (beta * 1.2);
  const Mat ridge = m2 * xh * x.transpose() / 8.0 * gamma.inverse() * y;
  EXPECT_LT(rel(m.gp, ridge), 1e-12);
  EXPECT_LT(rel(m.mean, m.gp + m.correction), 1e-15);
}

TEST(PredictorMean, ZeroTemperatureInterpolates) {
  const Mat x = random_matrix(5, 8, 4), y = random_matrix(5, 2, 5);
  const PredictorMean m = predictor_mean(PredictorGrams::training(gram(x), y), profile(20, 2), 1e9);
  EXPECT_LT(rel(m.mean, y), 1e-6);
}

TEST(PredictorMean, OrthogonalTestPointsGiveZero) {
  // Test inputs orthogonal to the span of the training inputs.
  Mat x = Mat::Zero(3, 6), xh = Mat::Zero(2, 6);
  x.leftCols(3) = random_matrix(3, 3, 6);
  xh.rightCols(3) = random_matrix(2, 3, 7);
  const PredictorMean m = predictor_mean(PredictorGrams::from_data(x, random_matrix(3, 1, 8), xh), profile(10, 1), 2.0);
  EXPECT_LT(m.mean.norm(), 1e-14);
}

TEST(PredictorMean, CorrectionScalesInverselyWithWidth) {
  const Mat x = random_matrix(6, 8, 9), xh = random_matrix(4, 8, 10), y = random_matrix(6, 2, 11);
  const PredictorGrams g = PredictorGrams::from_data(x, y, xh);
  const PredictorMean a = predictor_mean(g, profile(40, 2), 1.5), b = predictor_mean(g, profile(80, 2), 1.5);
  EXPECT_LT(rel(a.correction, 2.0 * b.correction), 1e-13);
  EXPECT_EQ(a.gp, b.gp);
}

TEST(PredictorCovariance, StructureAndLowTemperature) {
  const Mat x = random_matrix(5, 8, 12), xh = random_matrix(3, 8, 13), y = random_matrix(5, 2, 14);
  const PredictorGrams g = PredictorGrams::from_data(x, y, xh);
  const WidthProfile prof = profile(50, 2);
  const PredictorCovariance c = predictor_covariance(g, prof, 2.0);
  EXPECT_EQ(c.covariance.rows(), 6);
  EXPECT_TRUE(is_symmetric(c.covariance));
  EXPECT_TRUE(is_psd(c.gp));
  // Outputs are independent at infinite width.
  for (int mu = 0; mu < 3; ++mu)
    for (int nu = 0; nu < 3; ++nu) EXPECT_EQ(c.gp(mu * 2, nu * 2 + 1), 0.0);
  const double lt = low_temp_test_variance(g, prof);
  const PredictorCovariance cold = predictor_covariance(g, prof, 1e8);
  EXPECT_NEAR(0.5 * cold.covariance.trace(), lt, 1e-5 * std::abs(lt));
}

TEST(ErrorDecomposition, BiasAndVariance) {
  Mat mean(2, 1), target(2, 1);
  mean << 1.0, 2.0;
  target << 0.0, 4.0;
  const Mat cov = (Vec(2) << 0.5, 1.5).finished().asDiagonal();
  const ErrorDecomposition e = decompose_error(mean, cov, target);
  EXPECT_DOUBLE_EQ(e.bias, 2.5);
  EXPECT_DOUBLE_EQ(e.variance, 1.0);
  EXPECT_DOUBLE_EQ(e.total(), 3.5);
  const BiasVariance bv = bias_variance(mean, cov, target, mean, cov, mean);
  EXPECT_DOUBLE_EQ(bv.test.bias, 0.0);
}

TEST(WidthBenefit, ThresholdOnTargetScale) {
  const Mat g = gram(random_matrix(4, 6, 15));
  const WidthProfile prof = profile(10, 1);
  const double md2 = prof.m2(3);
  EXPECT_EQ(width_benefit_condition(g, 1.5 * md2 * g, prof), WidthEffect::Improves);
  EXPECT_EQ(width_benefit_condition(g, 0.5 * md2 * g, prof), WidthEffect::Worsens);
  EXPECT_EQ(width_benefit_condition(g, md2 * g, prof), WidthEffect::Marginal);
  EXPECT_EQ(to_string(WidthEffect::Improves), "improves");
}

TEST(WidthBenefit, TestVarianceDirection) {
  // The zero-temperature test variance falls with width exactly when the condition says it improves.
  const Mat x = random_matrix(4, 6, 16), xh = random_matrix(3, 6, 17);
  const WidthProfile narrow = profile(10, 1), wide = profile(100, 1);
  for (double scale : {0.4, 2.5}) {
    const Mat y = std::sqrt(scale * narrow.m2(3)) * x * random_matrix(6, 1, 18) / std::sqrt(6.0);
    const PredictorGrams g = PredictorGrams::from_data(x, y, xh);
    const WidthEffect e = width_benefit_condition(g.gxx, y * y.transpose(), narrow);
    ASSERT_NE(e, WidthEffect::Marginal);
    const bool falls = low_temp_test_variance(g, wide) < low_temp_test_variance(g, narrow);
    EXPECT_EQ(falls, e == WidthEffect::Improves) << scale;
  }
}

TEST(OmegaRegime, Cases) {
  auto r = omega_regime(0.0, 2);
  EXPECT_EQ(r.mean, MeanRegime::Zero);
  EXPECT_EQ(r.variance, VarianceRegime::Zero);
  r = omega_regime(-0.5, 2);
  EXPECT_EQ(r.mean, MeanRegime::Ridge);
  r = omega_regime(-0.8, 2);
  EXPECT_EQ(r.mean, MeanRegime::Interpolant);
  EXPECT_EQ(r.variance, VarianceRegime::Zero);
  r = omega_regime(-1.0, 2);
  EXPECT_EQ(r.variance, VarianceRegime::Finite);
  r = omega_regime(-2.0, 3);
  EXPECT_EQ(r.mean, MeanRegime::Interpolant);
  EXPECT_EQ(r.variance, VarianceRegime::Divergent);
  EXPECT_EQ(omega_regime(-2.0 / 3.0, 3).mean, MeanRegime::Ridge);
  EXPECT_EQ(to_string(VarianceRegime::Divergent), "divergent");
}

TEST(ZeroTempRecurrence, EqualGramsAreFixedPoint) {
  const Mat g = gram(random_matrix(3, 5, 19));
  WidthProfile prof;
  prof.hidden = {8, 5};
  prof.output = 12;
  prof.variances = {1, 1, 1};
  const AitchisonSolution s = aitchison_zero_temp_solve(g, g, prof);
  EXPECT_EQ(s.iterations, 0);
  for (const Mat& k : s.kernels) EXPECT_LT(rel(k, g), 1e-13);
}

TEST(ZeroTempRecurrence, ConvergesOnGenericTargets) {
  const Mat g = gram(random_matrix(3, 5, 20)), gyy = gram(random_matrix(3, 6, 21));
  WidthProfile prof;
  prof.hidden = {20, 30};
  prof.output = 6;
  prof.variances = {1, 1, 1};
  const AitchisonSolution s = aitchison_zero_temp_solve(g, gyy, prof);
  EXPECT_LE(s.residual, 1e-10);
  EXPECT_LE(aitchison_residual(g, gyy, prof, s.kernels), 1e-10);
  for (const Mat& k : s.kernels) EXPECT_TRUE(is_psd(k));
  // Wide hidden layers approach the perturbative kernels.
  const WidthProfile wide = prof.scaled(1000);
  WidthProfile w2 = wide;
  w2.output = 6;
  const AitchisonSolution sw = aitchison_zero_temp_solve(g, gyy, w2);
  EXPECT_LT(rel(sw.kernels[0], g + w2.width_factor(1) * (gyy - g)), 1e-3);
}

TEST(ProportionalLimit, RootAtUnity) {
  const double s2 = 1.3;
  const int d = 3;
  double res = 1.0;
  EXPECT_NEAR(li_sompolinsky_root(std::pow(s2, d - 1), s2, d, 0.4, &res), 1.0, 1e-12);
  EXPECT_LT(res, 1e-12);
  // Small α sends every root to 1.
  EXPECT_NEAR(li_sompolinsky_root(5.0, s2, d, 1e-9, &res), 1.0, 1e-7);
}

TEST(ProportionalLimit, WideLimitIsGpKernel) {
  const Mat x = random_matrix(4, 6, 22), y = random_matrix(4, 2, 23);
  const Mat g = gram(x);
  const long n = 1000000;
  const LiSompolinskyResult r = li_sompolinsky_limit(g, y, 1.2, 3, 2.0 / n, n, 2);
  EXPECT_LT(rel(r.kernel, 1.44 * g), 1e-4);
  EXPECT_LT(r.max_root_residual, 1e-12);
}
