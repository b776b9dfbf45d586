#ifndef FWBNN_MATHCORE_HPP
#define FWBNN_MATHCORE_HPP

#include "fwbnn/common.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace fwbnn {

inline constexpr double kSymmetryTol = 1e-12;
inline constexpr double kPsdTol = 1e-10;
inline constexpr double kPinvTol = 1e-10;
inline constexpr double kConditionWarn = 1e12;
inline constexpr int kMaxMomentOrder = 12;

struct GramMatrix {
  Mat entries;
  long normalizer = 1;
};

// Rows of `samples` are the p data vectors.
GramMatrix gram_from_samples(const Mat& samples, long normalizer);

double symmetry_error(const Mat& m);
bool is_symmetric(const Mat& m, double tol = kSymmetryTol);
double min_eigenvalue(const Mat& m);
bool is_psd(const Mat& m, double tol = kPsdTol);
// Throws invalid-argument unless m satisfies the Gram-matrix invariants.
void check_gram(const Mat& m, const std::string& what);
Mat symmetrize(const Mat& m);

struct Spectrum {
  Vec eigenvalues;   // nonincreasing
  Mat eigenvectors;  // columns
  Mat reconstruct() const;
};

Spectrum eigendecompose(const Mat& m);
Mat pseudoinverse(const Mat& m, double tol = kPinvTol);

// Sum over perfect pairings of products of covariances.
double isserlis_moment(const Mat& cov, const std::vector<int>& indices);
std::uint64_t pairing_count(int n);

Mat neumann_inverse(const Mat& base, const Mat& perturbation, double t, int order);
double logdet_series(const Mat& a, double t, int order);

// Cholesky-based solver for symmetric positive-definite systems. Warns when
// the estimated condition number exceeds kConditionWarn.
class SpdSolver {
 public:
  SpdSolver(const Mat& a, const std::string& what);
  Mat solve(const Mat& b) const;
  Mat inverse() const;
  double logdet() const;
  double condition_estimate() const { return condition_; }
  const Mat& lower() const { return lower_; }

 private:
  Mat lower_;
  double condition_ = 1.0;
};

Mat spd_inverse(const Mat& a, const std::string& what);
// L with L Lᵀ = a for a PSD a (Cholesky when possible, eigen square root otherwise).
Mat psd_factor(const Mat& a);

// Randomized quasi-Monte-Carlo Gaussian expectations: Sobol points with
// independent digital shifts, 16 replicates, standard error from the
// replicate spread.
struct QmcOptions {
  int log2_points = 18;
  int replicates = 16;
  std::uint64_t seed = 0x5EEDC0DEull;
};

struct Estimate {
  double value = 0.0;
  double se = 0.0;
};

// E[f(z)] for z ~ N(0, cov), cov of dimension ≤ 8. f receives the correlated sample.
Estimate gaussian_expectation(const Mat& cov, const std::function<double(const double*)>& f,
                              const QmcOptions& options = {});
// Vector-valued variant writing `outputs` values per sample.
void gaussian_expectation_vec(const Mat& cov, int outputs,
                              const std::function<void(const double*, double*)>& f, Vec& mean, Vec& se,
                              const QmcOptions& options = {});

// Sobol point (32-bit) for dimension index `dim` (0-based, < 8) and index i.
std::uint32_t sobol_u32(int dim, std::uint64_t i);

}  // namespace fwbnn

#endif
