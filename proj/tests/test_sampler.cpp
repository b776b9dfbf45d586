#include "fwbnn/sampler.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace fwbnn;

namespace {

Mat random_matrix(int r, int c, std::uint64_t seed) {
  Philox rng(seed, 0);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

NetworkConfig small_mlp(Architecture arch, long n, int n0, long nd) {
  NetworkConfig c;
  c.arch = arch;
  c.input_dim = n0;
  c.profile.hidden = {n};
  c.profile.output = nd;
  c.profile.variances = {1.3, 1.0};
  return c;
}

}  // namespace

TEST(PriorStrength, Limits) {
  EXPECT_DOUBLE_EQ(prior_strength(4.0, -0.5), 0.5);
  EXPECT_EQ(prior_strength(INFINITY, -1.0), 0.0);
  EXPECT_TRUE(std::isinf(prior_strength(0.0, -1.0)));
  EXPECT_DOUBLE_EQ(prior_strength(3.0, 0.0), 1.0);
}

TEST(LangevinUpdate, OrnsteinUhlenbeckVariance) {
  // Zero gradient, λ = 1, precision 2: θ ← (1 − 2dt)θ + √(2dt)ξ.
  const int m = 2000;
  const double dt = 0.01;
  Vec theta = Vec::Zero(m), grad = Vec::Zero(m), prec = Vec::Constant(m, 2.0);
  std::vector<double> noise(m);
  double s2 = 0.0;
  long count = 0;
  for (long step = 0; step < 3000; ++step) {
    step_noise(5, 0, step, noise.data(), noise.size());
    langevin_update(theta, grad, prec, 1.0, dt, 0.0, noise.data());
    if (step >= 1000) {
      s2 += theta.squaredNorm();
      count += m;
    }
  }
  const double exact = 2.0 * dt / (1.0 - std::pow(1.0 - 2.0 * dt, 2));
  // Correlation time ≈ 1/(2dt) = 50 steps.
  EXPECT_NEAR(s2 / count, exact, 4.0 * exact * std::sqrt(2.0 * 100.0 / count));
}

TEST(LangevinUpdate, InfiniteBetaIsGradientDescent) {
  Vec theta = (Vec(2) << 1.0, -2.0).finished();
  const Vec grad = (Vec(2) << 0.5, 0.25).finished();
  const std::vector<double> noise = {100.0, 100.0};
  langevin_update(theta, grad, Vec::Ones(2), INFINITY, 0.1, -1.0, noise.data());
  EXPECT_DOUBLE_EQ(theta(0), 1.0 - 0.05);
  EXPECT_DOUBLE_EQ(theta(1), -2.0 - 0.025);
}

TEST(StepNoise, Deterministic) {
  std::vector<double> a(7), b(7), c(7);
  step_noise(1, 2, 3, a.data(), a.size());
  step_noise(1, 2, 3, b.data(), b.size());
  step_noise(1, 2, 4, c.data(), c.size());
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Schedule, Validation) {
  LangevinSchedule s;
  s.thinning = 0;
  EXPECT_THROW(s.validate(), Error);
  s = LangevinSchedule{};
  s.dt = -1.0;
  EXPECT_THROW(s.validate(), Error);
}

TEST(GradientCheck, Architectures) {
  for (Architecture a : {Architecture::MlpLinear, Architecture::MlpRelu}) {
    NetworkConfig c = small_mlp(a, 6, 3, 2);
    c.profile.hidden = {6, 5};
    c.profile.variances = {1.0, 1.0, 1.0};
    const Network net(c);
    Dataset d{random_matrix(4, 3, 1), random_matrix(4, 2, 2)};
    Philox rng(3, 0);
    const GradientCheckResult r = gradient_check(net, d, net.sample_prior(rng), 80);
    EXPECT_LT(r.max_relative_error, 1e-5) << to_string(a);
    EXPECT_EQ(r.checked + r.skipped, std::min<Eigen::Index>(80, net.parameter_count()));
    EXPECT_GT(r.checked, 40);
  }
}

TEST(Chains, PriorAtZeroBeta) {
  const NetworkConfig c = small_mlp(Architecture::MlpLinear, 4, 3, 1);
  const Network net(c);
  const Dataset d{random_matrix(2, 3, 4), random_matrix(2, 1, 5)};
  LangevinSchedule s;
  s.dt = 0.01;
  s.burn_in = 2000;
  s.sample_steps = 100000;
  s.thinning = 10;
  s.chains = 4;
  s.seed = 6;
  const KernelEstimate e = run_chains(net, d, 0.0, s);
  const Mat expected = 1.3 * d.x * d.x.transpose() / 3.0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(e.mean[0](i, j), expected(i, j), 4.5 * e.se[0](i, j));
  EXPECT_GT(e.effective_samples, 100.0);
}

TEST(Chains, DeterministicAcrossLanes) {
  const Network net(small_mlp(Architecture::MlpRelu, 5, 3, 1));
  const Dataset d{random_matrix(3, 3, 7), random_matrix(3, 1, 8)};
  LangevinSchedule s;
  s.dt = 0.005;
  s.burn_in = 100;
  s.sample_steps = 1000;
  s.thinning = 5;
  s.chains = 3;
  s.seed = 9;
  RunOptions one, two;
  one.lanes = 1;
  two.lanes = 2;
  const KernelEstimate a = run_chains(net, d, 2.0, s, one), b = run_chains(net, d, 2.0, s, two);
  EXPECT_EQ(a.mean[0], b.mean[0]);
  EXPECT_EQ(a.samples, 3 * 200);
}

TEST(Chains, DivergenceNamesStep) {
  const Network net(small_mlp(Architecture::MlpLinear, 8, 3, 1));
  const Dataset d{10.0 * random_matrix(3, 3, 10), random_matrix(3, 1, 11)};
  LangevinSchedule s;
  s.dt = 50.0;
  s.burn_in = 1000;
  s.sample_steps = 1000;
  s.thinning = 1;
  s.seed = 12;
  try {
    run_chains(net, d, 100.0, s);
    ADD_FAILURE() << "no divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Divergence);
    EXPECT_NE(std::string(e.what()).find("dt"), std::string::npos) << e.what();
  }
}

TEST(Trace, RoundTrip) {
  std::stringstream ss;
  write_trace_header(ss, {{2, 2}, {3, 3}});
  TraceFrame f;
  f.chain = 4;
  f.step = 123456789012ull;
  f.kernels = {random_matrix(2, 2, 13), random_matrix(3, 3, 14)};
  write_trace_frame(ss, f);
  f.chain = 5;
  write_trace_frame(ss, f);
  const std::vector<TraceFrame> back = read_trace(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].chain, 4u);
  EXPECT_EQ(back[1].chain, 5u);
  EXPECT_EQ(back[0].step, f.step);
  EXPECT_EQ(back[1].kernels[1], f.kernels[1]);
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_trace(bad), Error);
}

TEST(Trace, WrittenByChains) {
  const Network net(small_mlp(Architecture::MlpLinear, 3, 2, 1));
  const Dataset d{random_matrix(2, 2, 15), random_matrix(2, 1, 16)};
  LangevinSchedule s;
  s.dt = 0.01;
  s.burn_in = 10;
  s.sample_steps = 40;
  s.thinning = 10;
  s.chains = 2;
  std::stringstream ss;
  RunOptions o;
  o.trace = &ss;
  o.batches = 2;
  run_chains(net, d, 1.0, s, o);
  const std::vector<TraceFrame> frames = read_trace(ss);
  EXPECT_EQ(frames.size(), 8u);
  EXPECT_EQ(frames[0].kernels[0].rows(), 2);
}
