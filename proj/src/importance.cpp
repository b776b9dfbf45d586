#include "fwbnn/importance.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <sstream>
#include <thread>

namespace fwbnn {

double readout_log_weight(const Mat& k, const Mat& gyy, long nd, double beta, double sigma_d2) {
  if (beta == 0.0) return 0.0;
  Mat a = beta * sigma_d2 * k;
  a.diagonal().array() += 1.0;
  Eigen::LLT<Mat> llt(a);
  if (llt.info() != Eigen::Success) fail(ErrorKind::SingularMatrix, "importance weight: I + beta*sigma^2*K is not PD");
  const Mat l = llt.matrixL();
  const double logdet = 2.0 * l.diagonal().array().log().sum();
  const Mat z = llt.solve(gyy);
  return -0.5 * static_cast<double>(nd) * (beta * z.trace() + logdet);
}

namespace {

struct BlockAccum {
  double max_lw = -INFINITY;
  double s0 = 0.0, q0 = 0.0;
  Vec s1, q1, q2;
  long count = 0;
};

// Merge b into a (a first), rescaling both to the larger max of log-weights.
void merge(BlockAccum& a, const BlockAccum& b) {
  if (b.count == 0) return;
  if (a.count == 0) {
    a = b;
    return;
  }
  const double m = std::max(a.max_lw, b.max_lw);
  const double fa = std::exp(a.max_lw - m), fb = std::exp(b.max_lw - m);
  a.s0 = a.s0 * fa + b.s0 * fb;
  a.s1 = a.s1 * fa + b.s1 * fb;
  a.q0 = a.q0 * fa * fa + b.q0 * fb * fb;
  a.q1 = a.q1 * fa * fa + b.q1 * fb * fb;
  a.q2 = a.q2 * fa * fa + b.q2 * fb * fb;
  a.max_lw = m;
  a.count += b.count;
}

}  // namespace

WeightedEstimate importance_estimate(const NetworkConfig& config, const Dataset& data, double beta, int dim,
                                     const KernelObservable& observable, const ImportanceOptions& options,
                                     const std::optional<Mat>& extra_x) {
  config.validate();
  require(dim >= 1, "importance: observable dimension must be >= 1");
  require(options.draws >= 2 && options.block >= 1, "importance: need draws >= 2 and block >= 1");
  require(options.batches >= 2, "importance: need at least two batches");
  require(beta >= 0.0, "importance: beta must be >= 0");
  if (!std::isfinite(beta)) fail(ErrorKind::NeedsFiniteTemperature, "importance: beta must be finite");
  const int p = data.samples();
  require(data.y.rows() == p, "importance: X and Y row counts differ");
  require(data.y.cols() == config.profile.output, "importance: Y columns must equal the output width");
  const auto start = std::chrono::steady_clock::now();

  Mat x = data.x;
  if (extra_x) {
    require(extra_x->cols() == data.x.cols(), "importance: test input width mismatch");
    x.resize(data.x.rows() + extra_x->rows(), data.x.cols());
    x << data.x, *extra_x;
  }
  const PriorKernelSampler sampler(config, x, options.method);
  const Mat gyy = data.gyy();
  const long nd = config.profile.output;
  const double sd2 = config.profile.variance(config.profile.depth());

  auto draw = [&](long i, std::vector<Mat>& ks) {
    const long base = options.antithetic ? i / 2 : i;
    const bool neg = options.antithetic && (i % 2 == 1);
    Philox rng(options.seed, static_cast<std::uint64_t>(base));
    ks = sampler.draw(rng, neg);
    const Mat rk = sampler.readout_kernel_of(ks.back());
    return readout_log_weight(rk.topLeftCorner(p, p), gyy, nd, beta, sd2);
  };

  // Reference observable (draw 0) reduces cancellation in the second-moment sums.
  Vec ref(dim);
  {
    std::vector<Mat> ks;
    draw(0, ks);
    observable(ks, ref.data());
  }

  const long nblocks = (options.draws + options.block - 1) / options.block;
  std::vector<BlockAccum> blocks(nblocks);
  std::vector<std::exception_ptr> errors(nblocks);
  std::atomic<long> next{0};
  auto worker = [&]() {
    std::vector<Mat> ks;
    Vec o(dim);
    std::vector<double> lw;
    std::vector<Vec> obs;
    for (long b = next++; b < nblocks; b = next++) {
      try {
        const long lo = b * options.block, hi = std::min(options.draws, lo + options.block);
        lw.assign(hi - lo, 0.0);
        obs.assign(hi - lo, Vec());
        for (long i = lo; i < hi; ++i) {
          lw[i - lo] = draw(i, ks);
          observable(ks, o.data());
          obs[i - lo] = o - ref;
        }
        BlockAccum a;
        a.max_lw = *std::max_element(lw.begin(), lw.end());
        a.s1 = Vec::Zero(dim);
        a.q1 = Vec::Zero(dim);
        a.q2 = Vec::Zero(dim);
        for (long j = 0; j < hi - lo; ++j) {
          const double w = std::exp(lw[j] - a.max_lw);
          a.s0 += w;
          a.q0 += w * w;
          a.s1 += w * obs[j];
          a.q1 += (w * w) * obs[j];
          a.q2 += (w * w) * obs[j].cwiseProduct(obs[j]);
        }
        a.count = hi - lo;
        blocks[b] = std::move(a);
      } catch (...) {
        errors[b] = std::current_exception();
      }
    }
  };
  int lanes = options.lanes > 0 ? options.lanes : static_cast<int>(std::thread::hardware_concurrency());
  lanes = static_cast<int>(std::clamp<long>(lanes, 1, nblocks));
  if (lanes == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < lanes; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  const int batches = static_cast<int>(std::min<long>(options.batches, nblocks));
  std::vector<BlockAccum> groups(batches);
  BlockAccum total;
  for (long b = 0; b < nblocks; ++b) {
    merge(groups[static_cast<int>(b * batches / nblocks)], blocks[b]);
    merge(total, blocks[b]);
  }

  WeightedEstimate out;
  out.draws = options.draws;
  const Vec shifted = total.s1 / total.s0;
  out.mean = shifted + ref;
  const Vec num = total.q2 - 2.0 * shifted.cwiseProduct(total.q1) + shifted.cwiseProduct(shifted) * total.q0;
  out.se = num.cwiseMax(0.0).cwiseSqrt() / total.s0;
  out.ess = total.s0 * total.s0 / total.q0;
  out.batch_means.resize(dim, batches);
  for (int g = 0; g < batches; ++g) out.batch_means.col(g) = groups[g].s1 / groups[g].s0 + ref;
  if (out.ess < kMinEffectiveSamples) {
    std::ostringstream os;
    os << "importance: effective sample size " << out.ess << " < " << kMinEffectiveSamples
       << "; estimate is unreliable";
    out.reliable = false;
    out.warning = os.str();
    warn(out.warning);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

ImportanceKernels importance_oracle(const NetworkConfig& config, const Dataset& data, double beta,
                                    const ImportanceOptions& options) {
  // Kernel shapes from one conditional draw.
  std::vector<std::pair<int, int>> shapes;
  {
    Philox rng(0, 0);
    for (const Mat& k : sample_prior_kernels(config, data.x, rng)) shapes.emplace_back(k.rows(), k.cols());
  }
  int dim = 0;
  for (auto [r, c] : shapes) dim += r * c;
  const KernelObservable obs = [](const std::vector<Mat>& ks, double* out) {
    for (const Mat& k : ks) {
      std::copy(k.data(), k.data() + k.size(), out);
      out += k.size();
    }
  };
  ImportanceKernels res;
  res.raw = importance_estimate(config, data, beta, dim, obs, options);
  Eigen::Index off = 0;
  for (auto [r, c] : shapes) {
    res.mean.push_back(Eigen::Map<const Mat>(res.raw.mean.data() + off, r, c));
    res.se.push_back(Eigen::Map<const Mat>(res.raw.se.data() + off, r, c));
    off += static_cast<Eigen::Index>(r) * c;
  }
  return res;
}

ImportancePredictor importance_predictor(const NetworkConfig& config, const Dataset& data, const Mat& test_x,
                                         double beta, const ImportanceOptions& options) {
  require(beta > 0.0, "importance_predictor: beta must be positive");
  const int p = data.samples();
  const int ph = static_cast<int>(test_x.rows());
  const int nd = static_cast<int>(data.y.cols());
  const double sd2 = config.profile.variance(config.profile.depth());
  const double eps = 1.0 / (beta * sd2);
  const int nm = ph * nd;
  const int dim = nm + ph * ph + nm * nm;
  const Mat y = data.y;
  const KernelObservable obs = [&](const std::vector<Mat>& ks, double* out) {
    Mat rk;
    if (config.is_cnn()) {
      FourIndexKernel k4;
      k4.p = p + ph;
      k4.shape = config.shape;
      k4.flat = ks.back();
      rk = readout_kernel(k4, config.readout);
    } else {
      rk = ks.back();
    }
    Mat k = rk.topLeftCorner(p, p);
    k.diagonal().array() += eps;
    const Eigen::LLT<Mat> llt(k);
    const Mat r = rk.topRightCorner(p, ph);
    const Mat m = r.transpose() * llt.solve(y);                                  // p̂ × n_d
    const Mat c = sd2 * (rk.bottomRightCorner(ph, ph) - r.transpose() * llt.solve(r));
    Vec mv(nm);
    for (int a = 0; a < ph; ++a)
      for (int j = 0; j < nd; ++j) mv(a * nd + j) = m(a, j);
    Eigen::Map<Vec>(out, nm) = mv;
    Eigen::Map<Mat>(out + nm, ph, ph) = c;
    Eigen::Map<Mat>(out + nm + ph * ph, nm, nm) = mv * mv.transpose();
  };
  ImportancePredictor res;
  res.raw = importance_estimate(config, data, beta, dim, obs, options, test_x);
  auto assemble = [&](const Vec& v, Mat& mean, Mat& cov) {
    const Vec mv = v.head(nm);
    const Eigen::Map<const Mat> c(v.data() + nm, ph, ph);
    const Eigen::Map<const Mat> mm(v.data() + nm + ph * ph, nm, nm);
    mean.resize(ph, nd);
    for (int a = 0; a < ph; ++a)
      for (int j = 0; j < nd; ++j) mean(a, j) = mv(a * nd + j);
    cov = mm - mv * mv.transpose();
    for (int a = 0; a < ph; ++a)
      for (int b = 0; b < ph; ++b)
        for (int j = 0; j < nd; ++j) cov(a * nd + j, b * nd + j) += c(a, b);
  };
  assemble(res.raw.mean, res.mean, res.covariance);
  res.mean_se.resize(ph, nd);
  for (int a = 0; a < ph; ++a)
    for (int j = 0; j < nd; ++j) res.mean_se(a, j) = res.raw.se(a * nd + j);
  // Covariance SE from the spread of per-batch covariance estimates.
  const int nb = static_cast<int>(res.raw.batch_means.cols());
  Mat sum = Mat::Zero(nm, nm), sq = Mat::Zero(nm, nm);
  for (int g = 0; g < nb; ++g) {
    Mat mean, cov;
    assemble(res.raw.batch_means.col(g), mean, cov);
    sum += cov;
    sq += cov.cwiseProduct(cov);
  }
  const Mat bm = sum / nb;
  res.covariance_se = ((sq / nb - bm.cwiseProduct(bm)).cwiseMax(0.0) * (static_cast<double>(nb) / (nb - 1)) / nb)
                          .cwiseSqrt();
  return res;
}

}  // namespace fwbnn
