#ifndef FWBNN_PRIORCUMULANTS_HPP
#define FWBNN_PRIORCUMULANTS_HPP

#include "fwbnn/gpkernels.hpp"
#include "fwbnn/network.hpp"

#include <cstdint>
#include <vector>

namespace fwbnn {

// Four-index tensors T_{μν,ρλ} are p²×p² matrices with row μ·p+ν and column ρ·p+λ.

// Leading prior covariance cov(K^{(ℓ)}, K^{(ℓ+τ)}) of a deep linear MLP.
Mat mlp_kernel_covariance(const Mat& gxx, const WidthProfile& profile, int layer, int lag = 0);

// Exact covariance, from the conditional-Wishart second-moment recursion.
Mat mlp_kernel_covariance_exact(const Mat& gxx, const WidthProfile& profile, int layer, int lag = 0);

// Wick(K)_{μν,ρλ} = K_{μρ}K_{νλ} + K_{μλ}K_{νρ}.
Mat wick_tensor(const Mat& k);

constexpr int kDefaultCnnCovarianceCap = 256;

enum class CnnCovarianceForm {
  Propagated,  // Σ_ℓ' (1/n_ℓ') P^{ℓ-ℓ'}⊗P^{ℓ-ℓ'} Wick(K∞^{(ℓ')}): exact at leading order
  ClosedForm,  // (Σ 1/n_ℓ') Wick(K∞^{(ℓ)}): exact for ℓ = 1, s = 1, or single-tap filters
};

// Lazily evaluated cov(K^{(ℓ)}_{μν,𝔞𝔟}, K^{(ℓ+τ)}_{ρλ,𝔠𝔡}) for a deep linear CNN.
class CnnKernelCovariance {
 public:
  CnnKernelCovariance(const FourIndexKernel& base, const std::vector<FilterSpec>& filters,
                      const WidthProfile& profile, int layer, int lag = 0,
                      CnnCovarianceForm form = CnnCovarianceForm::Propagated,
                      int cap = kDefaultCnnCovarianceCap);

  double operator()(int mu, int nu, int a, int b, int rho, int lam, int c, int d) const;
  // s²×s² block for fixed samples, row 𝔞·s+𝔟, column 𝔠·s+𝔡.
  Mat block(int mu, int nu, int rho, int lam) const;
  // Full (p·s)²×(p·s)² matrix, row (μ·s+𝔞)·(p·s) + (ν·s+𝔟); refuses more than 4096 rows.
  Mat materialize() const;
  int p() const { return p_; }
  int sites() const { return s_; }

 private:
  struct Term {
    double coef;
    Mat k;               // K∞^{(ℓ')} flattened
    std::vector<double> wa, wb;  // composite spatial filters on each slot
  };
  int p_ = 0, s_ = 0;
  std::vector<int> add_;  // site addition table
  std::vector<Term> terms_;
};

// n₁·cov(K_{μν}, K_{ρλ}) = E[φ_μφ_νφ_ρφ_λ] − K∞_{μν}K∞_{ρλ}, h ~ N(0, σ₁²G_xx).
// `se` (optional) receives entrywise standard errors (zero on exact paths).
Mat nonlinear_fourpoint_cov(const Mat& gxx, double sigma1_sq, const ActivationSpec& act, Mat* se = nullptr,
                            const ExpectationOptions& options = {});
// Per-sample moments E[φ(h_μ)^k], k = 1..4, for diagonal G_xx; column k-1.
Mat diagonal_moments(const Mat& gxx, double sigma1_sq, const ActivationSpec& act,
                     const ExpectationOptions& options = {});
// Same tensor as nonlinear_fourpoint_cov from factorized per-sample moments (G_xx diagonal).
Mat nonlinear_fourpoint_cov_diagonal(const Mat& gxx, double sigma1_sq, const ActivationSpec& act,
                                     const ExpectationOptions& options = {});

// κ₃(K_{ab}, K_{cd}, K_{ef}) for K = (1/n)Σ_i h_i h_iᵀ, h_i ~ N(0, C) i.i.d.
double wishart_third_cumulant(const Mat& c, long n, int a, int b, int cc, int d, int e, int f);

struct PriorCumulants {
  std::vector<Mat> mean;
  std::vector<Mat> mean_se;
  Mat covariance;     // over all layers stacked, layer ℓ at offsets[ℓ-1], entries column-major
  Mat covariance_se;
  std::vector<Eigen::Index> offsets;
  long draws = 0;
  // cov(K^{(l1)}, K^{(l2)}) as a four-index tensor (MLP layout).
  Mat layer_covariance(int l1, int l2) const;
  Mat layer_covariance_se(int l1, int l2) const;
};

struct OracleOptions {
  std::uint64_t seed = 1;
  KernelDrawMethod method = KernelDrawMethod::Conditional;
  bool antithetic = false;
  long block = 1024;
  int groups = 50;  // groups of draws for covariance standard errors
};

// Empirical prior mean and covariance of all hidden-layer kernels.
PriorCumulants prior_cumulant_oracle(const NetworkConfig& config, const Mat& x, long draws,
                                     const OracleOptions& options = {});

}  // namespace fwbnn

#endif
