#include "fwbnn/mathcore.hpp"
#include "fwbnn/rng.hpp"

#include <boost/math/special_functions/erf.hpp>

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>

namespace fwbnn {

namespace {

constexpr int kMaxQmcDim = 8;
constexpr int kBits = 32;

struct DirectionInit {
  int s;
  unsigned a;
  std::array<unsigned, 5> m;
};

// Joe and Kuo primitive polynomials and initial direction numbers, dimensions 2..8.
constexpr DirectionInit kInit[kMaxQmcDim - 1] = {
    {1, 0, {1, 0, 0, 0, 0}},  {2, 1, {1, 3, 0, 0, 0}},  {3, 1, {1, 3, 1, 0, 0}},  {3, 2, {1, 1, 1, 0, 0}},
    {4, 1, {1, 1, 3, 3, 0}},  {4, 4, {1, 3, 5, 13, 0}}, {5, 2, {1, 1, 5, 5, 17}},
};

struct Directions {
  std::uint32_t v[kMaxQmcDim][kBits];
  Directions() {
    for (int k = 0; k < kBits; ++k) v[0][k] = 1u << (31 - k);
    for (int d = 1; d < kMaxQmcDim; ++d) {
      const DirectionInit& init = kInit[d - 1];
      const int s = init.s;
      for (int k = 0; k < kBits; ++k) {
        if (k < s) {
          v[d][k] = init.m[k] << (31 - k);
        } else {
          std::uint32_t x = v[d][k - s] ^ (v[d][k - s] >> s);
          for (int i = 1; i < s; ++i) {
            if ((init.a >> (s - 1 - i)) & 1u) x ^= v[d][k - i];
          }
          v[d][k] = x;
        }
      }
    }
  }
};

const Directions& directions() {
  static const Directions dirs;
  return dirs;
}

double inverse_normal_cdf(double u) { return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * u); }

// Standard-normal QMC table: replicates × points × dim, cached per configuration.
using TableKey = std::tuple<int, int, int, std::uint64_t>;

const std::vector<double>& normal_table(int dim, const QmcOptions& opt) {
  static std::mutex mutex;
  static std::map<TableKey, std::unique_ptr<std::vector<double>>> cache;
  const TableKey key{dim, opt.log2_points, opt.replicates, opt.seed};
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(key);
  if (it != cache.end()) return *it->second;

  const std::uint64_t total = 1ull << opt.log2_points;
  const std::uint64_t per = total / static_cast<std::uint64_t>(opt.replicates);
  auto table = std::make_unique<std::vector<double>>(total * dim);
  Philox rng(opt.seed, 0x51A7ull);
  std::size_t pos = 0;
  for (int r = 0; r < opt.replicates; ++r) {
    std::uint32_t shift[kMaxQmcDim];
    for (int d = 0; d < dim; ++d) shift[d] = rng.next_u32();
    for (std::uint64_t i = 0; i < per; ++i) {
      for (int d = 0; d < dim; ++d) {
        const std::uint32_t x = sobol_u32(d, i) ^ shift[d];
        const double u = (static_cast<double>(x) + 0.5) * 0x1.0p-32;
        (*table)[pos++] = inverse_normal_cdf(u);
      }
    }
  }
  auto& ref = *table;
  cache.emplace(key, std::move(table));
  return ref;
}

}  // namespace

std::uint32_t sobol_u32(int dim, std::uint64_t i) {
  require(dim >= 0 && dim < kMaxQmcDim, "sobol_u32: dimension out of range");
  const Directions& dirs = directions();
  std::uint32_t x = 0;
  for (int k = 0; i != 0 && k < kBits; ++k, i >>= 1) {
    if (i & 1u) x ^= dirs.v[dim][k];
  }
  return x;
}

void gaussian_expectation_vec(const Mat& cov, int outputs, const std::function<void(const double*, double*)>& f,
                              Vec& mean, Vec& se, const QmcOptions& options) {
  const int k = static_cast<int>(cov.rows());
  require(cov.rows() == cov.cols(), "gaussian_expectation: covariance must be square");
  require(k >= 1 && k <= kMaxQmcDim, "gaussian_expectation: dimension must be in 1..8");
  require(options.replicates >= 2, "gaussian_expectation: need at least two replicates");
  require(options.log2_points >= 4 && options.log2_points <= 26, "gaussian_expectation: log2_points out of range");
  const Mat l = psd_factor(cov);
  const std::vector<double>& table = normal_table(k, options);
  const std::uint64_t total = 1ull << options.log2_points;
  const std::uint64_t per = total / static_cast<std::uint64_t>(options.replicates);

  Mat rep = Mat::Zero(outputs, options.replicates);
  std::vector<double> x(k), out(outputs);
  const double* z = table.data();
  for (int r = 0; r < options.replicates; ++r) {
    Vec acc = Vec::Zero(outputs);
    for (std::uint64_t i = 0; i < per; ++i, z += k) {
      for (int a = 0; a < k; ++a) {
        double s = 0.0;
        for (int b = 0; b <= a; ++b) s += l(a, b) * z[b];
        for (int b = a + 1; b < k; ++b) s += l(a, b) * z[b];
        x[a] = s;
      }
      f(x.data(), out.data());
      for (int o = 0; o < outputs; ++o) acc(o) += out[o];
    }
    rep.col(r) = acc / static_cast<double>(per);
  }
  mean = rep.rowwise().mean();
  se.resize(outputs);
  const double reps = static_cast<double>(options.replicates);
  for (int o = 0; o < outputs; ++o) {
    const double var = (rep.row(o).array() - mean(o)).square().sum() / (reps - 1.0);
    se(o) = std::sqrt(var / reps);
  }
}

Estimate gaussian_expectation(const Mat& cov, const std::function<double(const double*)>& f,
                              const QmcOptions& options) {
  Vec mean, se;
  gaussian_expectation_vec(
      cov, 1, [&](const double* x, double* out) { out[0] = f(x); }, mean, se, options);
  return {mean(0), se(0)};
}

}  // namespace fwbnn
