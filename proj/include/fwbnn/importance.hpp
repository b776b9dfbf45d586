#ifndef FWBNN_IMPORTANCE_HPP
#define FWBNN_IMPORTANCE_HPP

#include "fwbnn/network.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace fwbnn {

constexpr double kMinEffectiveSamples = 100.0;

struct ImportanceOptions {
  long draws = 1000000;
  std::uint64_t seed = 1;
  long block = 4096;   // draws per reduction block; fixes the summation order
  int lanes = 0;       // 0 = hardware concurrency
  int batches = 32;    // contiguous groups of blocks, for SEs of derived quantities
  KernelDrawMethod method = KernelDrawMethod::Conditional;
  bool antithetic = false;  // pair each draw with its negation (Weights method only)
};

struct WeightedEstimate {
  Vec mean;
  Vec se;             // delta-method standard error of the self-normalized mean
  Mat batch_means;    // dim × batches, self-normalized within each batch
  double ess = 0.0;   // (Σw)²/Σw²
  long draws = 0;
  bool reliable = true;
  std::string warning;
  double seconds = 0.0;
};

// log of the readout-marginal weight
// −(n_d/2)[β tr((I+βσ_d²K)⁻¹G_yy) + log det(I+βσ_d²K)].
double readout_log_weight(const Mat& readout_kernel, const Mat& gyy, long nd, double beta, double sigma_d2);

// Observable of one prior draw: receives the hidden kernels over the stacked inputs
// [X; extra] (see importance_estimate) and writes `dim` values.
using KernelObservable = std::function<void(const std::vector<Mat>& kernels, double* out)>;

// Self-normalized importance estimate of ⟨O⟩ under the posterior with the readout
// integrated out. Kernels are drawn over the training inputs stacked with `extra_x`
// (rows appended); the weight only sees the training block.
WeightedEstimate importance_estimate(const NetworkConfig& config, const Dataset& data, double beta, int dim,
                                     const KernelObservable& observable, const ImportanceOptions& options = {},
                                     const std::optional<Mat>& extra_x = std::nullopt);

struct ImportanceKernels {
  std::vector<Mat> mean;  // ⟨K^{(ℓ)}⟩, ℓ = 1..d-1
  std::vector<Mat> se;
  WeightedEstimate raw;
};

ImportanceKernels importance_oracle(const NetworkConfig& config, const Dataset& data, double beta,
                                    const ImportanceOptions& options = {});

struct ImportancePredictor {
  Mat mean;       // p̂ × n_d
  Mat mean_se;
  Mat covariance; // (p̂·n_d)², row index μ̂·n_d + j
  Mat covariance_se;
  WeightedEstimate raw;
};

// Posterior mean and covariance of test outputs, Rao–Blackwellized over the readout.
ImportancePredictor importance_predictor(const NetworkConfig& config, const Dataset& data, const Mat& test_x,
                                         double beta, const ImportanceOptions& options = {});

}  // namespace fwbnn

#endif
