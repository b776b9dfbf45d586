#ifndef FWBNN_GPKERNELS_HPP
#define FWBNN_GPKERNELS_HPP

#include "fwbnn/common.hpp"
#include "fwbnn/mathcore.hpp"

#include <functional>
#include <string>
#include <vector>

namespace fwbnn {

// Hidden widths n_1..n_{d-1}, output width n_d and prior variances σ_1²..σ_d².
struct WidthProfile {
  std::vector<long> hidden;
  long output = 1;
  std::vector<double> variances;

  static WidthProfile uniform(int depth, long width, long output, double variance = 1.0);

  int depth() const { return static_cast<int>(hidden.size()) + 1; }
  long width(int layer) const;  // 1-based; layer d is the output
  double variance(int layer) const;
  // m_ℓ² = σ_1²···σ_ℓ² (ℓ may be 0..d).
  double m2(int layer) const;
  // σ_{from+1}²···σ_{to}².
  double variance_product(int from, int to) const;
  // Σ_{ℓ'≤ℓ} 1/n_ℓ'.
  double inverse_width_sum(int layer) const;
  // Σ_{ℓ'≤ℓ} n_d/n_ℓ', evaluated in exact rational arithmetic then rounded once.
  double width_factor(int layer) const;
  std::string width_factor_exact(int layer) const;
  // Same profile with every hidden width multiplied by `factor`.
  WidthProfile scaled(long factor) const;
  void validate() const;
};

Mat mlp_linear_gp(const Mat& gxx, const WidthProfile& profile, int layer);

// Row-major spatial grid with periodic boundaries.
struct SpatialShape {
  std::vector<int> extents{1};

  int dims() const { return static_cast<int>(extents.size()); }
  int sites() const;
  std::vector<int> coords(int site) const;
  int site(const std::vector<int>& coords) const;
  // Site reached from `site` by adding `offset` per axis, modulo the extents.
  int shifted(int site, const std::vector<int>& offset) const;
};

// Filter weights v over a (2k+1)^q receptive field, row-major over offsets in [-k, k]^q.
struct FilterSpec {
  int dims = 1;
  int halfwidth = 0;
  std::vector<double> weights{1.0};

  static FilterSpec uniform(int dims, int halfwidth);
  int taps() const { return static_cast<int>(weights.size()); }
  std::vector<int> offset(int tap) const;
  void validate(const SpatialShape& shape) const;
};

// K_{μν,𝔞𝔟} stored flattened as a (p·s)×(p·s) matrix with row index μ·s+𝔞.
struct FourIndexKernel {
  int p = 0;
  SpatialShape shape;
  Mat flat;

  int sites() const { return shape.sites(); }
  int index(int mu, int a) const { return mu * sites() + a; }
  double operator()(int mu, int nu, int a, int b) const { return flat(index(mu, a), index(nu, b)); }
  void validate(const std::string& what) const;
};

// Inputs X are p × (n0·s), column index channel·s + site.
FourIndexKernel cnn_input_gram(const Mat& x, int channels, const SpatialShape& shape);
// K ↦ σ² Σ_𝔠 v_𝔠 K_{(𝔞+𝔠)(𝔟+𝔠)}; also the linear map P used by the covariance recursions.
FourIndexKernel cnn_propagate(const FourIndexKernel& k, const FilterSpec& filter, double sigma2);
FourIndexKernel cnn_linear_gp(const FourIndexKernel& base, const std::vector<FilterSpec>& filters,
                              const WidthProfile& profile, int layer);
// Shift of all inputs by `offset` (periodic), for equivariance checks.
Mat cnn_shift_inputs(const Mat& x, int channels, const SpatialShape& shape, const std::vector<int>& offset);

struct Readout {
  enum class Kind { Vectorization, Projection };
  Kind kind = Kind::Vectorization;
  Vec u;

  static Readout vectorization();
  static Readout projection(const Vec& u);
  static Readout global_average(int sites);
  static Readout single_pixel(int sites, int site);
  bool is_global_average(double tol = 1e-15) const;
  std::string name() const;
};

Mat readout_kernel(const FourIndexKernel& k, const Readout& readout);

struct ActivationSpec {
  enum class Kind { Identity, Relu, Erf, Polynomial, Custom };
  Kind kind = Kind::Identity;
  std::vector<double> coefficients;  // c_0 + c_1 x + c_2 x² + ...
  std::function<double(double)> custom;
  std::function<double(double)> custom_derivative;
  bool custom_odd = false;

  static ActivationSpec identity();
  static ActivationSpec relu();
  static ActivationSpec erf();
  static ActivationSpec polynomial(std::vector<double> coefficients);
  static ActivationSpec pointwise(std::function<double(double)> f, std::function<double(double)> df = {},
                                  bool odd = false);

  double operator()(double x) const;
  double derivative(double x) const;
  bool is_polynomial() const;
  int degree() const;  // polynomial paths only
  std::vector<double> polynomial_coefficients() const;
  bool is_odd() const;
  bool is_linear() const;
  bool has_derivative() const;
  std::string name() const;
};

ActivationSpec parse_activation(const std::string& text);

struct ExpectationOptions {
  QmcOptions qmc;
};

// E[Π_j φ(h_{samples[j]})] with h ~ N(0, cov). Exact for polynomials, QMC otherwise.
Estimate activation_moment(const Mat& cov, const std::vector<int>& samples, const ActivationSpec& act,
                           const ExpectationOptions& options = {});

// K∞ = E[φ(h)φ(h)ᵀ] with h ~ N(0, σ₁² G_xx). `se` (optional) receives entrywise standard errors.
Mat single_layer_gp(const Mat& gxx, double sigma1_sq, const ActivationSpec& act, Mat* se = nullptr,
                    const ExpectationOptions& options = {});

// Kernels of deep nonlinear MLPs (post-activation, ψ = φ(h)) by the layerwise GP recursion
// K^{(ℓ)} = E[φ(u)φ(u)ᵀ], u ~ N(0, σ_ℓ² K^{(ℓ-1)}), K^{(0)} = G_xx.
std::vector<Mat> deep_nonlinear_gp(const Mat& gxx, const WidthProfile& profile, const ActivationSpec& act,
                                   const ExpectationOptions& options = {});

// σ²_{ℓ,ℓ'} for 0 ≤ ℓ' < ℓ ≤ d; zero means no edge.
struct SkipConnectivity {
  int depth = 2;
  Mat sigma2;  // (d+1)×(d+1), entry (ℓ, ℓ')

  static SkipConnectivity chain(const WidthProfile& profile);
  double edge(int layer, int from) const { return sigma2(layer, from); }
  void validate() const;
};

double skip_gp_scale(const SkipConnectivity& conn, int layer, int tau);
Mat skip_linear_gp(const Mat& gxx, const SkipConnectivity& conn, int layer);

}  // namespace fwbnn

#endif
