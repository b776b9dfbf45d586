#include "fwbnn/sampler.hpp"

#include <algorithm>
#include <bit>
#include <type_traits>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <istream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace fwbnn {

void LangevinSchedule::validate() const {
  require(dt > 0.0 && std::isfinite(dt), "schedule: dt must be positive");
  require(burn_in >= 0 && sample_steps >= 0, "schedule: step counts must be nonnegative");
  require(thinning >= 1, "schedule: thinning must be >= 1");
  require(burn_in + sample_steps >= thinning, "schedule: burn_in + sample_steps must be >= thinning");
  require(chains >= 1, "schedule: need at least one chain");
  require(std::isfinite(omega), "schedule: omega must be finite");
}

double prior_strength(double beta, double omega) {
  require(beta >= 0.0, "prior_strength: beta must be >= 0");
  if (std::isinf(beta)) return omega < 0.0 ? 0.0 : (omega == 0.0 ? 1.0 : INFINITY);
  if (beta == 0.0) return omega < 0.0 ? INFINITY : (omega == 0.0 ? 1.0 : 0.0);
  return std::pow(beta, omega);
}

void langevin_update(Vec& theta, const Vec& grad, const Vec& prior_precision, double beta, double dt,
                     double omega, const double* noise) {
  require(dt > 0.0, "langevin_update: dt must be positive");
  require(beta >= 0.0, "langevin_update: beta must be >= 0");
  const Eigen::Index n = theta.size();
  if (beta == 0.0) {
    require(omega == -1.0, "langevin_update: beta = 0 requires omega = -1 (prior process in rescaled time)");
    const double amp = std::sqrt(2.0 * dt);
    for (Eigen::Index i = 0; i < n; ++i) theta(i) += -theta(i) * prior_precision(i) * dt + amp * noise[i];
    return;
  }
  const double lambda = prior_strength(beta, omega);
  if (std::isinf(beta)) {
    for (Eigen::Index i = 0; i < n; ++i) theta(i) -= (lambda * theta(i) * prior_precision(i) + grad(i)) * dt;
    return;
  }
  const double amp = std::sqrt(2.0 * dt / beta);
  for (Eigen::Index i = 0; i < n; ++i)
    theta(i) += -(lambda * theta(i) * prior_precision(i) + grad(i)) * dt + amp * noise[i];
}

void step_noise(std::uint64_t seed, int chain, long step, double* out, std::size_t n) {
  Philox rng(seed, stream_id(static_cast<std::uint64_t>(chain) + 1, static_cast<std::uint64_t>(step)));
  rng.fill_normal(out, n);
}

namespace {

void check_divergence(const Vec& theta, int chain, long step, double dt) {
  if (theta.allFinite() && theta.cwiseAbs().maxCoeff() <= kDivergenceBound) return;
  std::ostringstream os;
  os << "chain " << chain << " diverged at step " << step << " (|theta| > " << kDivergenceBound
     << "); reduce dt = " << dt;
  fail(ErrorKind::Divergence, os.str());
}

Vec precisions(const Network& net) { return net.prior_variances().cwiseInverse(); }

}  // namespace

void langevin_step(ChainState& state, const Network& net, const Dataset& data, double beta, double dt,
                   double omega) {
  const Vec prec = precisions(net);
  Vec grad = Vec::Zero(state.theta.size());
  if (beta > 0.0) net.energy_gradient(state.theta, data.x, data.y, grad);
  Vec noise(state.theta.size());
  step_noise(state.seed, state.chain, state.step, noise.data(), static_cast<std::size_t>(noise.size()));
  langevin_update(state.theta, grad, prec, beta, dt, omega, noise.data());
  ++state.step;
  check_divergence(state.theta, state.chain, state.step, dt);
}

namespace {

// Layout of the per-sample observable vector.
struct Layout {
  std::vector<std::pair<int, int>> kernel_shapes;
  Eigen::Index kernels = 0;
  Eigen::Index test = 0;
  int test_rows = 0, test_cols = 0;
  bool coupled = false;
  Eigen::Index total() const { return kernels + test + (coupled ? 2 * kernels : 0); }
};

struct ChainAccum {
  Mat batch_sum;  // total × batches
  Vec sum_sq;
  std::vector<long> batch_count;
  std::vector<TraceFrame> frames;
};

void flatten_kernels(const std::vector<Mat>& ks, double* out) {
  for (const Mat& k : ks) {
    std::memcpy(out, k.data(), sizeof(double) * static_cast<std::size_t>(k.size()));
    out += k.size();
  }
}

}  // namespace

KernelEstimate run_chains(const Network& net, const Dataset& data, double beta, const LangevinSchedule& schedule,
                          const RunOptions& options) {
  schedule.validate();
  require(beta >= 0.0, "run_chains: beta must be >= 0");
  require(options.batches >= 2, "run_chains: need at least two batches");
  require(schedule.samples_per_chain() >= options.batches, "run_chains: fewer samples than batches");
  if (options.coupled_prior) {
    require(schedule.omega == -1.0, "run_chains: coupled prior chains require omega = -1");
    require(beta > 0.0 && std::isfinite(beta), "run_chains: coupled prior chains require 0 < beta < inf");
  }
  const auto start = std::chrono::steady_clock::now();
  const int p = data.samples();
  const Vec prec = precisions(net);
  const Eigen::Index np = net.parameter_count();

  // Shapes from one forward pass at zero parameters.
  Layout lay;
  {
    const ForwardResult r = net.forward(Vec::Zero(np), data.x);
    for (const Mat& k : r.kernels) {
      lay.kernel_shapes.emplace_back(static_cast<int>(k.rows()), static_cast<int>(k.cols()));
      lay.kernels += k.size();
    }
    if (options.test_x) {
      const Mat t = net.forward(Vec::Zero(np), *options.test_x).outputs;
      lay.test_rows = static_cast<int>(t.rows());
      lay.test_cols = static_cast<int>(t.cols());
      lay.test = t.size();
    }
    lay.coupled = options.coupled_prior;
  }
  const Eigen::Index dim = lay.total();
  const long per_chain = schedule.samples_per_chain();
  const int batches = options.batches;

  std::vector<ChainAccum> acc(schedule.chains);
  std::vector<std::exception_ptr> errors(schedule.chains);
  std::atomic<int> next{0};

  auto run_one = [&](int c) {
    ChainAccum& a = acc[c];
    a.batch_sum = Mat::Zero(dim, batches);
    a.sum_sq = Vec::Zero(dim);
    a.batch_count.assign(batches, 0);
    Vec theta;
    if (options.init) {
      theta = options.init(c);
      require(theta.size() == np, "run_chains: init returned wrong parameter count");
    } else {
      Philox rng(schedule.seed, stream_id(0x1A17ull, static_cast<std::uint64_t>(c)));
      theta = net.sample_prior(rng);
    }
    Vec theta0 = theta;
    const double dt0 = options.coupled_prior ? schedule.dt / beta : 0.0;
    Vec grad = Vec::Zero(np), noise(np), obs(dim);
    ForwardResult fwd;
    const long total = schedule.burn_in + schedule.sample_steps;
    long sample = 0;
    for (long s = 0; s < total; ++s) {
      const bool record = s >= schedule.burn_in && (s - schedule.burn_in) % schedule.thinning == 0 &&
                          sample < per_chain;
      if (beta > 0.0) {
        net.energy_gradient(theta, data.x, data.y, grad, &fwd);
      } else if (record) {
        fwd = net.forward(theta, data.x);
      }
      if (record) {
        flatten_kernels(fwd.kernels, obs.data());
        if (options.test_x) {
          const Mat t = net.forward(theta, *options.test_x).outputs;
          std::memcpy(obs.data() + lay.kernels, t.data(), sizeof(double) * static_cast<std::size_t>(t.size()));
        }
        if (options.coupled_prior) {
          const ForwardResult f0 = net.forward(theta0, data.x);
          double* prior = obs.data() + lay.kernels + lay.test + lay.kernels;
          flatten_kernels(f0.kernels, prior);
          double* diff = obs.data() + lay.kernels + lay.test;
          for (Eigen::Index i = 0; i < lay.kernels; ++i) diff[i] = obs(i) - prior[i];
        }
        const int b = static_cast<int>(sample * batches / per_chain);
        a.batch_sum.col(b) += obs;
        a.sum_sq += obs.cwiseProduct(obs);
        ++a.batch_count[b];
        if (options.trace) a.frames.push_back({static_cast<std::uint32_t>(c), static_cast<std::uint64_t>(s), fwd.kernels});
        ++sample;
      }
      step_noise(schedule.seed, c, s, noise.data(), static_cast<std::size_t>(np));
      langevin_update(theta, grad, prec, beta, schedule.dt, schedule.omega, noise.data());
      check_divergence(theta, c, s + 1, schedule.dt);
      if (options.coupled_prior) {
        langevin_update(theta0, grad, prec, 0.0, dt0, -1.0, noise.data());
        check_divergence(theta0, c, s + 1, schedule.dt);
      }
    }
  };

  int lanes = options.lanes > 0 ? options.lanes : static_cast<int>(std::thread::hardware_concurrency());
  lanes = std::clamp(lanes, 1, schedule.chains);
  auto worker = [&]() {
    for (int c = next++; c < schedule.chains; c = next++) {
      try {
        run_one(c);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  if (lanes == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < lanes; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (int c = 0; c < schedule.chains; ++c)
    if (errors[c]) std::rethrow_exception(errors[c]);

  // Reduction in chain order: bitwise independent of the lane count.
  const long nb = static_cast<long>(schedule.chains) * batches;
  Mat means(dim, nb);
  Vec total = Vec::Zero(dim), sq = Vec::Zero(dim);
  long count = 0;
  for (int c = 0; c < schedule.chains; ++c) {
    for (int b = 0; b < batches; ++b) {
      means.col(static_cast<long>(c) * batches + b) = acc[c].batch_sum.col(b) / static_cast<double>(acc[c].batch_count[b]);
      total += acc[c].batch_sum.col(b);
      count += acc[c].batch_count[b];
    }
    sq += acc[c].sum_sq;
  }
  const Vec mean = total / static_cast<double>(count);
  Vec se(dim), ess(dim);
  for (Eigen::Index i = 0; i < dim; ++i) {
    const double bvar = (means.row(i).array() - mean(i)).square().sum() / static_cast<double>(nb - 1);
    se(i) = std::sqrt(bvar / static_cast<double>(nb));
    const double svar = std::max(sq(i) / static_cast<double>(count) - mean(i) * mean(i), 0.0);
    ess(i) = se(i) > 0.0 ? std::min(svar / (se(i) * se(i)), static_cast<double>(count)) : static_cast<double>(count);
  }

  KernelEstimate out;
  out.samples = count;
  auto unpack = [&](Eigen::Index offset, std::vector<Mat>& m, std::vector<Mat>& e) {
    for (auto [r, cc] : lay.kernel_shapes) {
      m.push_back(Eigen::Map<const Mat>(mean.data() + offset, r, cc));
      e.push_back(Eigen::Map<const Mat>(se.data() + offset, r, cc));
      offset += static_cast<Eigen::Index>(r) * cc;
    }
  };
  unpack(0, out.mean, out.se);
  out.effective_samples = lay.kernels > 0 ? ess.head(lay.kernels).minCoeff() : static_cast<double>(count);
  if (options.test_x) {
    out.test_mean = Eigen::Map<const Mat>(mean.data() + lay.kernels, lay.test_rows, lay.test_cols);
    out.test_se = Eigen::Map<const Mat>(se.data() + lay.kernels, lay.test_rows, lay.test_cols);
  }
  if (options.coupled_prior) {
    unpack(lay.kernels + lay.test, out.coupled_diff, out.coupled_diff_se);
    unpack(2 * lay.kernels + lay.test, out.coupled_prior_mean, out.coupled_prior_se);
  }
  if (options.trace) {
    write_trace_header(*options.trace, lay.kernel_shapes);
    for (const ChainAccum& a : acc)
      for (const TraceFrame& f : a.frames) write_trace_frame(*options.trace, f);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (p > 0) out.note = "multi-chain estimate; standard errors from batch means";
  return out;
}

// ---------------------------------------------------------------- trace stream

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::is_arithmetic_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
bool get(std::istream& in, T& v) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  std::memcpy(&v, bytes, sizeof(T));
  return true;
}

constexpr std::uint32_t kTraceVersion = 1;

}  // namespace

void write_trace_header(std::ostream& out, const std::vector<std::pair<int, int>>& shapes) {
  out.write("BNNS", 4);
  put<std::uint32_t>(out, kTraceVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shapes.size()));
  for (auto [r, c] : shapes) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(c));
  }
}

void write_trace_frame(std::ostream& out, const TraceFrame& frame) {
  put<std::uint32_t>(out, frame.chain);
  put<std::uint64_t>(out, frame.step);
  for (const Mat& k : frame.kernels)
    for (Eigen::Index i = 0; i < k.size(); ++i) put<double>(out, k.data()[i]);
}

std::vector<TraceFrame> read_trace(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "BNNS", 4) != 0) fail(ErrorKind::FormatError, "trace: bad magic");
  std::uint32_t version = 0, layers = 0;
  if (!get(in, version) || version != kTraceVersion) fail(ErrorKind::FormatError, "trace: unsupported version");
  if (!get(in, layers)) fail(ErrorKind::FormatError, "trace: truncated header");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes(layers);
  for (auto& [r, c] : shapes)
    if (!get(in, r) || !get(in, c)) fail(ErrorKind::FormatError, "trace: truncated header");
  std::vector<TraceFrame> frames;
  while (true) {
    TraceFrame f;
    if (!get(in, f.chain)) break;
    if (!get(in, f.step)) fail(ErrorKind::FormatError, "trace: truncated frame");
    for (auto [r, c] : shapes) {
      Mat k(r, c);
      for (Eigen::Index i = 0; i < k.size(); ++i)
        if (!get(in, k.data()[i])) fail(ErrorKind::FormatError, "trace: truncated frame");
      f.kernels.push_back(std::move(k));
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

// ---------------------------------------------------------------- gradient check

namespace {

// Activation pattern of all preactivations (nonsmooth activations only).
std::vector<bool> kink_pattern(const Network& net, const Vec& theta, const Mat& x) {
  std::vector<bool> pattern;
  if (net.config().hidden_activation().kind != ActivationSpec::Kind::Relu) return pattern;
  const ForwardResult r = net.forward(theta, x);
  for (const Mat& h : r.preactivations)
    for (Eigen::Index i = 0; i < h.size(); ++i) pattern.push_back(h.data()[i] > 0.0);
  return pattern;
}

}  // namespace

GradientCheckResult gradient_check(const Network& net, const Dataset& data, const Vec& theta, int coords, double h,
                                   std::uint64_t seed) {
  require(coords >= 1 && h > 0.0, "gradient_check: need coords >= 1 and h > 0");
  Vec grad;
  net.energy_gradient(theta, data.x, data.y, grad);
  const double floor = 1e-3 * grad.cwiseAbs().maxCoeff();
  const std::vector<bool> base = kink_pattern(net, theta, data.x);
  Philox rng(seed, 0x6C0Cull);
  GradientCheckResult res;
  const Eigen::Index n = theta.size();
  int attempts = 0;
  while (res.checked < std::min<Eigen::Index>(coords, n) && attempts < 20 * coords) {
    ++attempts;
    const Eigen::Index k = static_cast<Eigen::Index>(rng.next_u64() % static_cast<std::uint64_t>(n));
    Vec tp = theta, tm = theta;
    tp(k) += h;
    tm(k) -= h;
    if (!base.empty() && (kink_pattern(net, tp, data.x) != base || kink_pattern(net, tm, data.x) != base)) {
      ++res.skipped;
      continue;
    }
    const double fd = (net.energy(tp, data.x, data.y) - net.energy(tm, data.x, data.y)) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(grad(k)), floor, 1e-300});
    res.max_relative_error = std::max(res.max_relative_error, std::abs(fd - grad(k)) / denom);
    ++res.checked;
  }
  return res;
}

}  // namespace fwbnn
