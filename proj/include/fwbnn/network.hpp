#ifndef FWBNN_NETWORK_HPP
#define FWBNN_NETWORK_HPP

#include "fwbnn/common.hpp"
#include "fwbnn/gpkernels.hpp"
#include "fwbnn/rng.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fwbnn {

enum class Architecture { MlpLinear, MlpRelu, SingleNonlinear, CnnLinear1d, CnnLinear2d };

std::string to_string(Architecture arch);
Architecture parse_architecture(const std::string& text);

// Network f = n_{d-1}^{-1/2} W^{(d)} ψ with a fully connected linear readout. Hidden
// layers are fully connected (MLP) or circular convolutions (CNN). Kernels are
// post-activation kernels K^{(ℓ)} = ψψᵀ/n_ℓ.
struct NetworkConfig {
  Architecture arch = Architecture::MlpLinear;
  WidthProfile profile;
  int input_dim = 1;                       // n₀ (input channels for CNNs)
  ActivationSpec activation;               // single-nonlinear only; mlp-relu uses relu
  SpatialShape shape;                      // CNN only
  std::vector<FilterSpec> filters;         // CNN only, one per hidden layer
  Readout readout;                         // CNN only
  std::optional<SkipConnectivity> skip;    // mlp-linear only

  bool is_cnn() const { return arch == Architecture::CnnLinear1d || arch == Architecture::CnnLinear2d; }
  int sites() const { return is_cnn() ? shape.sites() : 1; }
  ActivationSpec hidden_activation() const;
  bool is_linear() const;
  // Input width per sample: n₀ for MLPs, n₀·s for CNNs.
  int input_width() const { return input_dim * sites(); }
  void validate() const;
};

struct ParameterBlock {
  Eigen::Index offset = 0;
  int rows = 0;
  int cols = 0;
  int layer = 0;   // target layer ℓ (d for the readout)
  int source = 0;  // source layer (differs from ℓ-1 for skip edges)
  int tap = 0;     // CNN filter tap
  double prior_variance = 1.0;
  Eigen::Index size() const { return static_cast<Eigen::Index>(rows) * cols; }
};

struct ForwardResult {
  std::vector<Mat> preactivations;   // layers 1..d-1
  std::vector<Mat> activations;      // layers 1..d-1 (p×n_ℓ, or (p·s)×n_ℓ for CNNs)
  std::vector<Mat> kernels;          // layers 1..d-1 (p×p, or flattened (p·s)×(p·s))
  Mat readout_features;              // p × (feature dimension)
  Mat outputs;                       // p × n_d
};

class Network {
 public:
  explicit Network(NetworkConfig config);

  const NetworkConfig& config() const { return config_; }
  Eigen::Index parameter_count() const { return count_; }
  const std::vector<ParameterBlock>& blocks() const { return blocks_; }
  Vec prior_variances() const;
  Vec sample_prior(Philox& rng) const;

  // X is p × input_width().
  ForwardResult forward(const Vec& theta, const Mat& x) const;
  double energy(const Vec& theta, const Mat& x, const Mat& y) const;
  // Returns E and writes ∇E (reverse mode); `out` optionally receives the forward pass.
  double energy_gradient(const Vec& theta, const Mat& x, const Mat& y, Vec& grad,
                         ForwardResult* out = nullptr) const;

  // Readout kernel from the last hidden layer's kernel (identity for MLPs).
  Mat readout_kernel_of(const Mat& last_kernel, int p) const;
  Eigen::Map<const Mat> block(const Vec& theta, const ParameterBlock& b) const;

 private:
  Mat input_activation(const Mat& x) const;
  Mat readout_features(const Mat& act, int p) const;
  void readout_features_adjoint(const Mat& grad_features, int p, Mat& grad_act) const;
  // Row permutation of the circular shift 𝔞 ↦ 𝔞+𝔠 for every tap of hidden layer `layer`.
  std::vector<std::vector<int>> shift_tables(int layer, int p) const;
  double readout_scale() const;

  NetworkConfig config_;
  std::vector<ParameterBlock> blocks_;
  Eigen::Index count_ = 0;
};

enum class KernelDrawMethod { Conditional, Weights };

// Training data: X is p × input_width, Y is p × n_d.
struct Dataset {
  Mat x;
  Mat y;
  int samples() const { return static_cast<int>(x.rows()); }
  Mat gyy() const;
};

// Repeated exact prior draws of the hidden-layer kernels over fixed inputs; caches
// everything that does not depend on the draw.
class PriorKernelSampler {
 public:
  PriorKernelSampler(const NetworkConfig& config, const Mat& x,
                     KernelDrawMethod method = KernelDrawMethod::Conditional);
  // Kernels K^{(1)}..K^{(d-1)}.
  std::vector<Mat> draw(Philox& rng, bool negate = false) const;
  const NetworkConfig& config() const { return config_; }
  int samples() const { return static_cast<int>(x_.rows()); }
  Mat readout_kernel_of(const Mat& last_kernel) const;

 private:
  NetworkConfig config_;
  Mat x_;
  KernelDrawMethod method_;
  Mat base_;         // K^{(0)} (flattened for CNNs)
  Mat first_lower_;  // factor of the first layer's row covariance
  std::optional<Network> net_;
};

// One exact prior draw of the hidden-layer kernels over inputs X. `Conditional`
// samples each layer's rows given the previous layer's kernel (Wishart/Bartlett
// for linear layers), `Weights` runs a forward pass with freshly drawn weights.
std::vector<Mat> sample_prior_kernels(const NetworkConfig& config, const Mat& x, Philox& rng,
                                      KernelDrawMethod method = KernelDrawMethod::Conditional,
                                      bool negate = false);

// W ~ Wishart_q(n, I) via the Bartlett decomposition (explicit Gaussian sum when n < q);
// returns A with A Aᵀ = W.
Mat wishart_factor(int q, long n, Philox& rng);

}  // namespace fwbnn

#endif
