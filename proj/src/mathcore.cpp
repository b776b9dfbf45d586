#include "fwbnn/mathcore.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fwbnn {

GramMatrix gram_from_samples(const Mat& samples, long normalizer) {
  require(normalizer >= 1, "gram_from_samples: normalizer must be >= 1");
  require(samples.rows() >= 1, "gram_from_samples: need at least one row");
  GramMatrix g;
  g.normalizer = normalizer;
  g.entries = symmetrize(samples * samples.transpose() / static_cast<double>(normalizer));
  return g;
}

double symmetry_error(const Mat& m) {
  if (m.rows() != m.cols()) return INFINITY;
  const double scale = m.cwiseAbs().maxCoeff();
  if (scale == 0.0) return 0.0;
  return (m - m.transpose()).cwiseAbs().maxCoeff() / scale;
}

bool is_symmetric(const Mat& m, double tol) { return symmetry_error(m) <= tol; }

double min_eigenvalue(const Mat& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

bool is_psd(const Mat& m, double tol) {
  const double scale = m.norm();
  return min_eigenvalue(m) >= -tol * std::max(scale, 1e-300);
}

void check_gram(const Mat& m, const std::string& what) {
  if (m.rows() != m.cols()) fail(ErrorKind::InvalidArgument, what + ": matrix is not square");
  if (!m.allFinite()) fail(ErrorKind::InvalidArgument, what + ": non-finite entries");
  if (!is_symmetric(m)) fail(ErrorKind::InvalidArgument, what + ": not symmetric");
  if (!is_psd(m)) fail(ErrorKind::InvalidArgument, what + ": not positive semidefinite");
}

Mat symmetrize(const Mat& m) { return 0.5 * (m + m.transpose()); }

Mat Spectrum::reconstruct() const {
  return eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
}

Spectrum eigendecompose(const Mat& m) {
  require(m.rows() == m.cols(), "eigendecompose: matrix must be square");
  require(m.allFinite(), "eigendecompose: non-finite entries");
  require(is_symmetric(m), "eigendecompose: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  const Eigen::Index p = m.rows();
  Spectrum s;
  s.eigenvalues.resize(p);
  s.eigenvectors.resize(p, p);
  for (Eigen::Index i = 0; i < p; ++i) {
    s.eigenvalues(i) = es.eigenvalues()(p - 1 - i);
    s.eigenvectors.col(i) = es.eigenvectors().col(p - 1 - i);
  }
  return s;
}

Mat pseudoinverse(const Mat& m, double tol) {
  require(tol > 0.0, "pseudoinverse: tol must be positive");
  require(m.allFinite(), "pseudoinverse: non-finite entries");
  if (m.size() == 0) return Mat(m.cols(), m.rows());
  Eigen::BDCSVD<Mat> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec& sv = svd.singularValues();
  const double cutoff = tol * (sv.size() > 0 ? sv(0) : 0.0);
  Vec inv = Vec::Zero(sv.size());
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > cutoff && sv(i) > 0.0) inv(i) = 1.0 / sv(i);
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

namespace {

double pairings(const Mat& cov, int* idx, int n) {
  if (n == 0) return 1.0;
  const int first = idx[0];
  double total = 0.0;
  for (int j = 1; j < n; ++j) {
    const double c = cov(first, idx[j]);
    if (c == 0.0) continue;
    // Remove positions 0 and j, recurse on the remainder.
    int rest[kMaxMomentOrder];
    int m = 0;
    for (int k = 1; k < n; ++k)
      if (k != j) rest[m++] = idx[k];
    total += c * pairings(cov, rest, m);
  }
  return total;
}

}  // namespace

double isserlis_moment(const Mat& cov, const std::vector<int>& indices) {
  const int n = static_cast<int>(indices.size());
  if (n > kMaxMomentOrder) {
    fail(ErrorKind::UnsupportedOrder, "isserlis_moment: " + std::to_string(n) + " indices exceeds the cap of " +
                                          std::to_string(kMaxMomentOrder));
  }
  require(cov.rows() == cov.cols(), "isserlis_moment: covariance must be square");
  for (int i : indices) require(i >= 0 && i < cov.rows(), "isserlis_moment: index out of range");
  if (n % 2 == 1) return 0.0;
  int idx[kMaxMomentOrder];
  // Sorted order makes the value independent of the multiset's presentation.
  std::vector<int> sorted = indices;
  std::sort(sorted.begin(), sorted.end());
  std::copy(sorted.begin(), sorted.end(), idx);
  return pairings(cov, idx, n);
}

std::uint64_t pairing_count(int n) {
  if (n % 2 == 1) return 0;
  std::uint64_t c = 1;
  for (int k = n - 1; k > 1; k -= 2) c *= static_cast<std::uint64_t>(k);
  return c;
}

Mat neumann_inverse(const Mat& base, const Mat& perturbation, double t, int order) {
  require(base.rows() == base.cols(), "neumann_inverse: base must be square");
  require(perturbation.rows() == base.rows() && perturbation.cols() == base.cols(),
          "neumann_inverse: shape mismatch");
  require(order >= 0, "neumann_inverse: order must be >= 0");
  Eigen::FullPivLU<Mat> lu(base);
  if (!lu.isInvertible()) fail(ErrorKind::SingularMatrix, "neumann_inverse: base matrix is singular");
  const Mat ginv = lu.inverse();
  if (t == 0.0) return ginv;
  const Mat a = t * ginv * perturbation;
  Eigen::EigenSolver<Mat> es(a, false);
  const double radius = es.eigenvalues().cwiseAbs().maxCoeff();
  if (radius >= 1.0) {
    std::ostringstream os;
    os << "neumann_inverse: spectral radius " << radius << " >= 1";
    fail(ErrorKind::DivergentSeries, os.str());
  }
  Mat term = ginv;
  Mat sum = ginv;
  for (int k = 1; k <= order; ++k) {
    term = -a * term;
    sum += term;
  }
  return sum;
}

double logdet_series(const Mat& a, double t, int order) {
  require(a.rows() == a.cols(), "logdet_series: matrix must be square");
  require(order >= 0, "logdet_series: order must be >= 0");
  double sum = 0.0;
  Mat power = Mat::Identity(a.rows(), a.cols());
  double tk = 1.0;
  for (int k = 1; k <= order; ++k) {
    power = power * a;
    tk *= t;
    const double sign = (k % 2 == 1) ? 1.0 : -1.0;
    sum += sign * power.trace() * tk / k;
  }
  return sum;
}

SpdSolver::SpdSolver(const Mat& a, const std::string& what) {
  require(a.rows() == a.cols(), what + ": matrix must be square");
  Eigen::LLT<Mat> llt(symmetrize(a));
  if (llt.info() != Eigen::Success) {
    fail(ErrorKind::SingularMatrix, what + ": matrix is not positive definite");
  }
  lower_ = llt.matrixL();
  const double rc = llt.rcond();
  condition_ = rc > 0.0 ? 1.0 / rc : INFINITY;
  if (condition_ > kConditionWarn) {
    std::ostringstream os;
    os << what << ": condition number estimate " << condition_ << " exceeds " << kConditionWarn;
    warn(os.str());
  }
}

Mat SpdSolver::solve(const Mat& b) const {
  Mat y = lower_.triangularView<Eigen::Lower>().solve(b);
  return lower_.transpose().triangularView<Eigen::Upper>().solve(y);
}

Mat SpdSolver::inverse() const {
  return symmetrize(solve(Mat::Identity(lower_.rows(), lower_.cols())));
}

double SpdSolver::logdet() const {
  return 2.0 * lower_.diagonal().array().log().sum();
}

Mat spd_inverse(const Mat& a, const std::string& what) { return SpdSolver(a, what).inverse(); }

Mat psd_factor(const Mat& a) {
  const Mat s = symmetrize(a);
  Eigen::LLT<Mat> llt(s);
  if (llt.info() == Eigen::Success) {
    Mat l = llt.matrixL();
    if (l.allFinite()) return l;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(s);
  Vec root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

}  // namespace fwbnn
