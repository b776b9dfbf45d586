#ifndef FWBNN_CORRECTIONS_HPP
#define FWBNN_CORRECTIONS_HPP

#include "fwbnn/gpkernels.hpp"
#include "fwbnn/mathcore.hpp"
#include "fwbnn/priorcumulants.hpp"

#include <vector>

namespace fwbnn {

struct TemperatureParams {
  double beta = 1.0;
  double sigma_d2 = 1.0;
  bool low_temperature_limit = false;  // β = ∞ with invertible kernels

  // σ_d² taken from the readout layer of the profile.
  static TemperatureParams from(double beta, const WidthProfile& profile);
  static TemperatureParams zero_temperature(double sigma_d2);
  void validate() const;
};

// Φ = σ_d⁻²Γ⁻¹G_yyΓ⁻¹ − Γ⁻¹ with Γ = K∞ + I/(βσ_d²).
struct PhiMatrix {
  Mat entries;
  Mat gamma;  // empty in the low-temperature limit
};

PhiMatrix phi_operator(const Mat& k_readout, const Mat& gyy, const TemperatureParams& temp);

// E O + (n_d/2) Σ_ρλ Φ_ρλ cov(O, K_ρλ). `cov_o_k` has one row per entry of O
// (row-major over O) and column ρ·p+λ.
Mat conjecture1_mean(const Mat& prior_mean, const Mat& cov_o_k, const PhiMatrix& phi, long nd);

// Deep linear MLP. Functions taking a profile read σ_d² from it and use temp.beta.
Mat deep_linear_correction(const Mat& gxx, const Mat& gyy, const WidthProfile& profile,
                           const TemperatureParams& temp, int layer);
// ⟨K^{(ℓ)}⟩ − K∞^{(ℓ)} alone.
Mat deep_linear_delta(const Mat& gxx, const Mat& gyy, const WidthProfile& profile, const TemperatureParams& temp,
                      int layer);
Mat low_temp_linear(const Mat& gxx, const Mat& gyy, const WidthProfile& profile, int layer);

struct EigenbasisCorrection {
  Spectrum spectrum;  // of G_xx
  Vec lambda_tilde;   // βm_d²Λ/(1+βm_d²Λ)
  Mat rotated;        // UᵀΔU
  Mat rotate_back() const { return spectrum.eigenvectors * rotated * spectrum.eigenvectors.transpose(); }
};

EigenbasisCorrection eigenbasis_correction(const Mat& gxx, const Mat& gyy, const WidthProfile& profile,
                                           const TemperatureParams& temp, int layer);

// Neumann expansion of Φ in t = βσ_d² through t^order.
PhiMatrix high_temp_expansion(const Mat& k_readout, const Mat& gyy, const TemperatureParams& temp, int order);

enum class CnnCorrectionMode {
  Propagated,  // full leading-order covariance, propagated through the spatial filters
  ClosedForm,  // (Σ n_d/n_ℓ') · readout contraction of K∞^{(ℓ)} ⊗ K∞^{(ℓ)}
};

FourIndexKernel cnn_correction_delta(const FourIndexKernel& base, const Mat& gyy, const std::vector<FilterSpec>& filters,
                                     const WidthProfile& profile, const TemperatureParams& temp, int layer,
                                     const Readout& readout, CnnCorrectionMode mode = CnnCorrectionMode::Propagated);
FourIndexKernel cnn_correction(const FourIndexKernel& base, const Mat& gyy, const std::vector<FilterSpec>& filters,
                               const WidthProfile& profile, const TemperatureParams& temp, int layer,
                               const Readout& readout, CnnCorrectionMode mode = CnnCorrectionMode::Propagated);

struct NonlinearCorrection {
  Mat k_inf;
  Mat delta;
  Mat mean;      // k_inf + delta
  Mat delta_se;  // zero on exact paths
  PhiMatrix phi;
};

// Single hidden layer: h ~ N(0, σ₁²G_xx), readout variance σ₂² = temp.sigma_d2.
NonlinearCorrection single_nonlinear_correction(const Mat& gxx, const Mat& gyy, double sigma1_sq,
                                                const ActivationSpec& act, const TemperatureParams& temp, long n1,
                                                long nd, const ExpectationOptions& options = {});
// Diagonal G_xx: factorized moments and Sherman–Morrison for Γ⁻¹.
NonlinearCorrection single_nonlinear_correction_diagonal(const Mat& gxx, const Mat& gyy, double sigma1_sq,
                                                         const ActivationSpec& act, const TemperatureParams& temp,
                                                         long n1, long nd, const ExpectationOptions& options = {});
// Γ⁻¹ for Γ = diag(v) + mmᵀ + I/(βσ₂²) by Sherman–Morrison.
Mat sherman_morrison_gamma_inverse(const Vec& var, const Vec& mean, double beta, double sigma2_sq);

// κ₃(O_a, O_b, K_μν) stored as one m×m slice per (μ,ν), slice index μ·p+ν.
struct ThirdCumulant {
  std::vector<Mat> slices;
  int p = 0;
  bool empty() const { return slices.empty(); }
};

// Observables O = entries of K (row-major) for a linear single hidden layer of width n₁.
ThirdCumulant linear_kernel_third_cumulant(const Mat& gxx, double sigma1_sq, long n1);
Mat linear_kernel_covariance_flat(const Mat& gxx, double sigma1_sq, long n1);

// K(O,O) + (n_d/2) Σ Φ_μν κ₃(O,O,K_μν).
Mat posterior_covariance_correction(const Mat& cov_oo, const ThirdCumulant& k3, const PhiMatrix& phi, long nd);

}  // namespace fwbnn

#endif
