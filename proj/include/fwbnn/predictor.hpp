#ifndef FWBNN_PREDICTOR_HPP
#define FWBNN_PREDICTOR_HPP

#include "fwbnn/corrections.hpp"
#include "fwbnn/gpkernels.hpp"

#include <string>
#include <vector>

namespace fwbnn {

// Train/test Gram blocks of a deep linear network.
struct PredictorGrams {
  Mat gxx, gxh, ghh;  // p×p, p×p̂, p̂×p̂
  Mat y;              // p × n_d training targets
  static PredictorGrams from_data(const Mat& x, const Mat& y, const Mat& x_hat);
  // Test set equal to the training set.
  static PredictorGrams training(const Mat& gxx, const Mat& y);
  void validate() const;
};

struct PredictorMean {
  Mat gp;          // R̂ᵀΓ⁻¹Y
  Mat correction;  // O(1/n) term
  Mat mean;
};

struct PredictorCovariance {
  Mat gp;          // (p̂·n_d)², row μ̂·n_d + j
  Mat correction;
  Mat covariance;
};

PredictorMean predictor_mean(const PredictorGrams& grams, const WidthProfile& profile, double beta);
PredictorCovariance predictor_covariance(const PredictorGrams& grams, const WidthProfile& profile, double beta);

struct ErrorDecomposition {
  double bias = 0.0;      // ½Σ‖⟨f⟩−y‖²
  double variance = 0.0;  // ½Σ cov(f_k, f_k)
  double total() const { return bias + variance; }
};

ErrorDecomposition decompose_error(const Mat& mean, const Mat& covariance, const Mat& targets);

struct BiasVariance {
  ErrorDecomposition train;
  ErrorDecomposition test;
};

BiasVariance bias_variance(const Mat& train_mean, const Mat& train_cov, const Mat& y, const Mat& test_mean,
                           const Mat& test_cov, const Mat& y_hat);

// β→∞ test variance ½n_dσ_d² tr(K̂−R̂ᵀK⁻¹R̂)[1 + (Σ1/n_ℓ)(σ_d⁻² tr(K⁻¹G_yy) − p)].
double low_temp_test_variance(const PredictorGrams& grams, const WidthProfile& profile);

enum class WidthEffect { Improves, Worsens, Marginal };
std::string to_string(WidthEffect e);

// Sign of the leading width dependence of the zero-temperature test error:
// improves iff tr(G_xx⁻¹G_yy)/p > σ_1²···σ_d².
WidthEffect width_benefit_condition(const Mat& gxx, const Mat& gyy, const WidthProfile& profile);

enum class MeanRegime { Zero, Ridge, Interpolant };
enum class VarianceRegime { Zero, Finite, Divergent };
struct OmegaRegime {
  MeanRegime mean;
  VarianceRegime variance;
};
std::string to_string(MeanRegime r);
std::string to_string(VarianceRegime r);

// Zero-temperature limits for a weight-decay strength λ(β) ~ β^ω.
OmegaRegime omega_regime(double omega, int depth);

struct AitchisonOptions {
  double damping = 0.5;
  int max_iterations = 10000;
  double tolerance = 1e-10;
};

struct AitchisonSolution {
  std::vector<Mat> kernels;  // K^{(1)}..K^{(d-1)}
  double residual = 0.0;     // max_ℓ ‖R_ℓ‖_F / (n_ℓ + n_{ℓ+1})
  int iterations = 0;
};

// Residual of the zero-temperature recurrence at the given interior kernels.
double aitchison_residual(const Mat& gxx, const Mat& gyy, const WidthProfile& profile, const std::vector<Mat>& kernels);

// Damped fixed-point solve of the implicit zero-temperature kernel recurrence
// (unit prior variances), started from the low-temperature perturbative kernels.
AitchisonSolution aitchison_zero_temp_solve(const Mat& gxx, const Mat& gyy, const WidthProfile& profile,
                                            const AitchisonOptions& options = {});

struct LiSompolinskyResult {
  Mat kernel;
  Vec z;        // roots
  Vec omega;    // eigenvalues of R
  Mat v;        // eigenvectors of R
  Vec m_diag;   // diagonal of M_ℓ
  double max_root_residual = 0.0;
};

// Root of 1−α = z − ασ^{−2(d−1)}z^{−(d−1)}ω on z > 0.
double li_sompolinsky_root(double omega, double sigma2, int depth, double alpha, double* residual = nullptr);

// Zero-temperature kernel σ^{2ℓ}[(1−n_d/n)^ℓ G_xx + n⁻¹σ^{−2d} Y V M_ℓ Vᵀ Yᵀ] for equal widths n and
// equal variances σ².
LiSompolinskyResult li_sompolinsky_limit(const Mat& gxx, const Mat& y, double sigma2, int depth, double alpha, long n,
                                         int layer);

}  // namespace fwbnn

#endif
