#ifndef FWBNN_SAMPLER_HPP
#define FWBNN_SAMPLER_HPP

#include "fwbnn/network.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace fwbnn {

constexpr double kDivergenceBound = 1e10;

struct LangevinSchedule {
  double dt = 1e-3;
  long burn_in = 200000;
  long sample_steps = 200000;
  long thinning = 10;
  std::uint64_t seed = 0;
  int chains = 1;
  double omega = -1.0;  // λ(β) = β^ω
  void validate() const;
  long samples_per_chain() const { return sample_steps / thinning; }
};

struct ChainState {
  Vec theta;
  long step = 0;
  int chain = 0;
  std::uint64_t seed = 0;
};

// λ(β) = β^ω, with λ(∞) = 0 and λ(0) = ∞ for ω < 0.
double prior_strength(double beta, double omega);

// θ ← θ − (λ(β) θ∘π + ∇E) dt + √(2dt/β) ξ, with π the per-parameter prior precisions.
// β = ∞ drops the noise. β = 0 (ω = -1 only) is the prior Ornstein–Uhlenbeck process
// in rescaled time t/β: θ ← θ − θ∘π dt + √(2dt) ξ, with ∇E ignored.
void langevin_update(Vec& theta, const Vec& grad, const Vec& prior_precision, double beta, double dt,
                     double omega, const double* noise);

// Standard normals for (seed, chain, step).
void step_noise(std::uint64_t seed, int chain, long step, double* out, std::size_t n);

// One full-batch update of a network chain; throws Divergence naming dt when any |θ| > 1e10.
void langevin_step(ChainState& state, const Network& net, const Dataset& data, double beta, double dt,
                   double omega = -1.0);

struct KernelEstimate {
  std::vector<Mat> mean;  // per hidden layer
  std::vector<Mat> se;
  double effective_samples = 0.0;  // smallest over kernel entries
  long samples = 0;
  // Optional predictor statistics on a test set: mean outputs and their entrywise SE.
  Mat test_mean;
  Mat test_se;
  // Coupled-prior statistics: ⟨K⟩_β − ⟨K⟩_prior from synchronously coupled chains.
  std::vector<Mat> coupled_diff;
  std::vector<Mat> coupled_diff_se;
  std::vector<Mat> coupled_prior_mean;
  std::vector<Mat> coupled_prior_se;
  double seconds = 0.0;
  std::string note;
};

struct RunOptions {
  std::optional<Mat> test_x;
  // Also evolves a β = 0 chain driven by the same noise (rescaled time dt/β) and reports
  // the kernel difference; requires ω = -1 and 0 < β < ∞.
  bool coupled_prior = false;
  int lanes = 0;  // 0 = hardware concurrency
  int batches = 20;
  std::ostream* trace = nullptr;  // BNNS record stream
  // Initial parameters per chain; default draws from the prior with the chain's stream.
  std::function<Vec(int chain)> init;
};

KernelEstimate run_chains(const Network& net, const Dataset& data, double beta, const LangevinSchedule& schedule,
                          const RunOptions& options = {});

// BNNS trace records: "BNNS", u32 version, u32 layers, then per layer u32 rows, u32 cols;
// then frames of u32 chain, u64 step, followed by the layer kernels as f64, column-major.
struct TraceFrame {
  std::uint32_t chain = 0;
  std::uint64_t step = 0;
  std::vector<Mat> kernels;
};
void write_trace_header(std::ostream& out, const std::vector<std::pair<int, int>>& shapes);
void write_trace_frame(std::ostream& out, const TraceFrame& frame);
std::vector<TraceFrame> read_trace(std::istream& in);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  int checked = 0;
  int skipped = 0;  // coordinates whose stencil crosses an activation kink
};

// Central differences with step h on `coords` random coordinates. The relative error is
// |g − fd| / max(|fd|, |g|, 1e-3·‖g‖∞).
GradientCheckResult gradient_check(const Network& net, const Dataset& data, const Vec& theta, int coords = 100,
                                   double h = 1e-5, std::uint64_t seed = 7);

}  // namespace fwbnn

#endif
