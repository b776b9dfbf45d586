#include "fwbnn/gpkernels.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace fwbnn {

namespace mp = boost::multiprecision;

// ---------------------------------------------------------------- WidthProfile

WidthProfile WidthProfile::uniform(int depth, long width, long output, double variance) {
  require(depth >= 2, "WidthProfile::uniform: depth must be >= 2");
  WidthProfile p;
  p.hidden.assign(depth - 1, width);
  p.output = output;
  p.variances.assign(depth, variance);
  return p;
}

long WidthProfile::width(int layer) const {
  require(layer >= 1 && layer <= depth(), "WidthProfile::width: layer out of range");
  return layer == depth() ? output : hidden[layer - 1];
}

double WidthProfile::variance(int layer) const {
  require(layer >= 1 && layer <= depth(), "WidthProfile::variance: layer out of range");
  return variances[layer - 1];
}

double WidthProfile::m2(int layer) const {
  require(layer >= 0 && layer <= depth(), "WidthProfile::m2: layer out of range");
  double m = 1.0;
  for (int l = 1; l <= layer; ++l) m *= variances[l - 1];
  return m;
}

double WidthProfile::variance_product(int from, int to) const {
  require(from >= 0 && to <= depth() && from <= to, "WidthProfile::variance_product: bad range");
  double m = 1.0;
  for (int l = from + 1; l <= to; ++l) m *= variances[l - 1];
  return m;
}

double WidthProfile::inverse_width_sum(int layer) const {
  require(layer >= 1 && layer <= depth() - 1, "WidthProfile::inverse_width_sum: layer out of range");
  mp::cpp_rational sum = 0;
  for (int l = 1; l <= layer; ++l) sum += mp::cpp_rational(1, hidden[l - 1]);
  return sum.convert_to<double>();
}

namespace {

mp::cpp_rational width_factor_rational(const WidthProfile& p, int layer) {
  mp::cpp_rational sum = 0;
  for (int l = 1; l <= layer; ++l) sum += mp::cpp_rational(p.output, p.hidden[l - 1]);
  return sum;
}

double rational_to_double(const mp::cpp_rational& r) {
  const mp::cpp_int num = mp::numerator(r);
  const mp::cpp_int den = mp::denominator(r);
  const mp::cpp_int limit = mp::cpp_int(1) << 53;
  if (mp::abs(num) <= limit && den <= limit) {
    // Both exactly representable: a single correctly rounded division.
    return num.convert_to<double>() / den.convert_to<double>();
  }
  return r.convert_to<double>();
}

}  // namespace

double WidthProfile::width_factor(int layer) const {
  require(layer >= 1 && layer <= depth() - 1, "WidthProfile::width_factor: layer out of range");
  return rational_to_double(width_factor_rational(*this, layer));
}

std::string WidthProfile::width_factor_exact(int layer) const {
  require(layer >= 1 && layer <= depth() - 1, "WidthProfile::width_factor_exact: layer out of range");
  std::ostringstream os;
  os << width_factor_rational(*this, layer);
  return os.str();
}

WidthProfile WidthProfile::scaled(long factor) const {
  WidthProfile p = *this;
  for (long& n : p.hidden) n *= factor;
  return p;
}

void WidthProfile::validate() const {
  require(!hidden.empty(), "WidthProfile: depth must be >= 2");
  for (long n : hidden) require(n >= 1, "WidthProfile: hidden widths must be >= 1");
  require(output >= 1, "WidthProfile: output width must be >= 1");
  require(static_cast<int>(variances.size()) == depth(), "WidthProfile: need one prior variance per layer");
  for (double v : variances) require(v > 0.0 && std::isfinite(v), "WidthProfile: prior variances must be > 0");
}

Mat mlp_linear_gp(const Mat& gxx, const WidthProfile& profile, int layer) {
  profile.validate();
  require(layer >= 1 && layer <= profile.depth() - 1, "mlp_linear_gp: layer out of range");
  return profile.m2(layer) * gxx;
}

// ---------------------------------------------------------------- spatial

int SpatialShape::sites() const {
  int s = 1;
  for (int e : extents) s *= e;
  return s;
}

std::vector<int> SpatialShape::coords(int site) const {
  std::vector<int> c(extents.size());
  for (int a = dims() - 1; a >= 0; --a) {
    c[a] = site % extents[a];
    site /= extents[a];
  }
  return c;
}

int SpatialShape::site(const std::vector<int>& c) const {
  int s = 0;
  for (int a = 0; a < dims(); ++a) s = s * extents[a] + c[a];
  return s;
}

int SpatialShape::shifted(int s, const std::vector<int>& offset) const {
  std::vector<int> c = coords(s);
  for (int a = 0; a < dims(); ++a) {
    const int e = extents[a];
    c[a] = ((c[a] + offset[a]) % e + e) % e;
  }
  return site(c);
}

FilterSpec FilterSpec::uniform(int dims, int halfwidth) {
  require(dims >= 1 && halfwidth >= 0, "FilterSpec::uniform: bad shape");
  FilterSpec f;
  f.dims = dims;
  f.halfwidth = halfwidth;
  int taps = 1;
  for (int a = 0; a < dims; ++a) taps *= 2 * halfwidth + 1;
  f.weights.assign(taps, 1.0 / taps);
  return f;
}

std::vector<int> FilterSpec::offset(int tap) const {
  const int w = 2 * halfwidth + 1;
  std::vector<int> o(dims);
  for (int a = dims - 1; a >= 0; --a) {
    o[a] = tap % w - halfwidth;
    tap /= w;
  }
  return o;
}

void FilterSpec::validate(const SpatialShape& shape) const {
  require(dims == shape.dims(), "FilterSpec: dimensionality does not match the spatial shape");
  int taps_expected = 1;
  for (int a = 0; a < dims; ++a) taps_expected *= 2 * halfwidth + 1;
  require(static_cast<int>(weights.size()) == taps_expected, "FilterSpec: weight count does not match shape");
  double sum = 0.0;
  for (double v : weights) {
    require(v > 0.0, "FilterSpec: weights must be positive");
    sum += v;
  }
  require(std::abs(sum - 1.0) <= 1e-12, "FilterSpec: weights must sum to 1");
  for (int e : shape.extents) require(2 * halfwidth + 1 <= e, "FilterSpec: receptive field exceeds spatial extent");
}

void FourIndexKernel::validate(const std::string& what) const {
  const int n = p * sites();
  require(flat.rows() == n && flat.cols() == n, what + ": flattened kernel has wrong shape");
  require(is_symmetric(flat, 1e-12), what + ": exchange symmetry violated");
  const double scale = std::max(flat.norm(), 1e-300);
  require(min_eigenvalue(flat) >= -1e-8 * scale, what + ": flattened kernel is not PSD");
}

FourIndexKernel cnn_input_gram(const Mat& x, int channels, const SpatialShape& shape) {
  const int s = shape.sites();
  require(channels >= 1, "cnn_input_gram: channels must be >= 1");
  require(x.cols() == static_cast<Eigen::Index>(channels) * s, "cnn_input_gram: input width must be channels*sites");
  const int p = static_cast<int>(x.rows());
  Mat z(p * s, channels);
  for (int mu = 0; mu < p; ++mu)
    for (int a = 0; a < s; ++a)
      for (int i = 0; i < channels; ++i) z(mu * s + a, i) = x(mu, i * s + a);
  FourIndexKernel k;
  k.p = p;
  k.shape = shape;
  k.flat = symmetrize(z * z.transpose() / static_cast<double>(channels));
  return k;
}

FourIndexKernel cnn_propagate(const FourIndexKernel& k, const FilterSpec& filter, double sigma2) {
  filter.validate(k.shape);
  const int s = k.sites();
  const int p = k.p;
  const int taps = filter.taps();
  std::vector<int> sh(static_cast<std::size_t>(s) * taps);
  for (int a = 0; a < s; ++a)
    for (int t = 0; t < taps; ++t) sh[a * taps + t] = k.shape.shifted(a, filter.offset(t));
  FourIndexKernel out;
  out.p = p;
  out.shape = k.shape;
  out.flat = Mat::Zero(p * s, p * s);
  for (int mu = 0; mu < p; ++mu)
    for (int nu = 0; nu < p; ++nu)
      for (int a = 0; a < s; ++a)
        for (int b = 0; b < s; ++b) {
          double acc = 0.0;
          for (int t = 0; t < taps; ++t)
            acc += filter.weights[t] * k.flat(mu * s + sh[a * taps + t], nu * s + sh[b * taps + t]);
          out.flat(mu * s + a, nu * s + b) = sigma2 * acc;
        }
  return out;
}

FourIndexKernel cnn_linear_gp(const FourIndexKernel& base, const std::vector<FilterSpec>& filters,
                              const WidthProfile& profile, int layer) {
  profile.validate();
  require(layer >= 1 && layer <= profile.depth() - 1, "cnn_linear_gp: layer out of range");
  require(static_cast<int>(filters.size()) >= layer, "cnn_linear_gp: need one filter per hidden layer");
  FourIndexKernel k = base;
  for (int l = 1; l <= layer; ++l) k = cnn_propagate(k, filters[l - 1], profile.variance(l));
  return k;
}

Mat cnn_shift_inputs(const Mat& x, int channels, const SpatialShape& shape, const std::vector<int>& offset) {
  const int s = shape.sites();
  require(x.cols() == static_cast<Eigen::Index>(channels) * s, "cnn_shift_inputs: shape mismatch");
  Mat y(x.rows(), x.cols());
  for (int a = 0; a < s; ++a) {
    const int b = shape.shifted(a, offset);
    for (int i = 0; i < channels; ++i) y.col(i * s + b) = x.col(i * s + a);
  }
  return y;
}

Readout Readout::vectorization() { return Readout{}; }

Readout Readout::projection(const Vec& u) {
  Readout r;
  r.kind = Kind::Projection;
  r.u = u;
  return r;
}

Readout Readout::global_average(int sites) { return projection(Vec::Constant(sites, 1.0 / sites)); }

Readout Readout::single_pixel(int sites, int site) {
  Vec u = Vec::Zero(sites);
  u(site) = 1.0;
  return projection(u);
}

bool Readout::is_global_average(double tol) const {
  if (kind != Kind::Projection || u.size() == 0) return false;
  const double target = 1.0 / static_cast<double>(u.size());
  return (u.array() - target).abs().maxCoeff() <= tol;
}

std::string Readout::name() const {
  if (kind == Kind::Vectorization) return "vectorization";
  if (is_global_average()) return "gap";
  return "projection";
}

Mat readout_kernel(const FourIndexKernel& k, const Readout& readout) {
  const int s = k.sites();
  const int p = k.p;
  Mat out = Mat::Zero(p, p);
  if (readout.kind == Readout::Kind::Vectorization) {
    for (int mu = 0; mu < p; ++mu)
      for (int nu = 0; nu < p; ++nu) {
        double acc = 0.0;
        for (int a = 0; a < s; ++a) acc += k.flat(mu * s + a, nu * s + a);
        out(mu, nu) = acc / s;
      }
    return out;
  }
  require(readout.u.size() == s, "readout_kernel: projection vector length must equal the number of sites");
  for (int mu = 0; mu < p; ++mu)
    for (int nu = 0; nu < p; ++nu)
      out(mu, nu) = readout.u.dot(k.flat.block(mu * s, nu * s, s, s) * readout.u);
  return out;
}

// ---------------------------------------------------------------- activations

ActivationSpec ActivationSpec::identity() { return ActivationSpec{}; }

ActivationSpec ActivationSpec::relu() {
  ActivationSpec a;
  a.kind = Kind::Relu;
  return a;
}

ActivationSpec ActivationSpec::erf() {
  ActivationSpec a;
  a.kind = Kind::Erf;
  return a;
}

ActivationSpec ActivationSpec::polynomial(std::vector<double> coefficients) {
  ActivationSpec a;
  a.kind = Kind::Polynomial;
  while (coefficients.size() > 1 && coefficients.back() == 0.0) coefficients.pop_back();
  a.coefficients = std::move(coefficients);
  return a;
}

ActivationSpec ActivationSpec::pointwise(std::function<double(double)> f, std::function<double(double)> df,
                                         bool odd) {
  ActivationSpec a;
  a.kind = Kind::Custom;
  a.custom = std::move(f);
  a.custom_derivative = std::move(df);
  a.custom_odd = odd;
  return a;
}

double ActivationSpec::operator()(double x) const {
  switch (kind) {
    case Kind::Identity: return x;
    case Kind::Relu: return x > 0.0 ? x : 0.0;
    case Kind::Erf: return std::erf(x);
    case Kind::Polynomial: {
      double acc = 0.0;
      for (auto it = coefficients.rbegin(); it != coefficients.rend(); ++it) acc = acc * x + *it;
      return acc;
    }
    case Kind::Custom: return custom(x);
  }
  return 0.0;
}

double ActivationSpec::derivative(double x) const {
  switch (kind) {
    case Kind::Identity: return 1.0;
    case Kind::Relu: return x > 0.0 ? 1.0 : 0.0;
    case Kind::Erf: return 2.0 / std::sqrt(M_PI) * std::exp(-x * x);
    case Kind::Polynomial: {
      double acc = 0.0;
      for (std::size_t k = coefficients.size(); k-- > 1;) acc = acc * x + static_cast<double>(k) * coefficients[k];
      return acc;
    }
    case Kind::Custom:
      require(static_cast<bool>(custom_derivative), "activation: custom activation has no derivative");
      return custom_derivative(x);
  }
  return 0.0;
}

bool ActivationSpec::is_polynomial() const { return kind == Kind::Identity || kind == Kind::Polynomial; }

int ActivationSpec::degree() const {
  if (kind == Kind::Identity) return 1;
  require(kind == Kind::Polynomial, "activation: degree requested for a non-polynomial");
  return static_cast<int>(coefficients.size()) - 1;
}

std::vector<double> ActivationSpec::polynomial_coefficients() const {
  if (kind == Kind::Identity) return {0.0, 1.0};
  require(kind == Kind::Polynomial, "activation: coefficients requested for a non-polynomial");
  return coefficients;
}

bool ActivationSpec::is_odd() const {
  switch (kind) {
    case Kind::Identity:
    case Kind::Erf: return true;
    case Kind::Relu: return false;
    case Kind::Polynomial:
      for (std::size_t k = 0; k < coefficients.size(); k += 2)
        if (coefficients[k] != 0.0) return false;
      return true;
    case Kind::Custom: return custom_odd;
  }
  return false;
}

bool ActivationSpec::is_linear() const {
  if (kind == Kind::Identity) return true;
  return kind == Kind::Polynomial && coefficients.size() == 2 && coefficients[0] == 0.0 && coefficients[1] == 1.0;
}

bool ActivationSpec::has_derivative() const { return kind != Kind::Custom || static_cast<bool>(custom_derivative); }

std::string ActivationSpec::name() const {
  switch (kind) {
    case Kind::Identity: return "identity";
    case Kind::Relu: return "relu";
    case Kind::Erf: return "erf";
    case Kind::Polynomial: {
      std::ostringstream os;
      os << "poly:";
      for (std::size_t k = 0; k < coefficients.size(); ++k) os << (k ? "," : "") << coefficients[k];
      return os.str();
    }
    case Kind::Custom: return "custom";
  }
  return "unknown";
}

ActivationSpec parse_activation(const std::string& text) {
  if (text == "identity" || text == "linear") return ActivationSpec::identity();
  if (text == "relu") return ActivationSpec::relu();
  if (text == "erf") return ActivationSpec::erf();
  if (text == "quadratic") return ActivationSpec::polynomial({0.0, 0.0, 1.0});
  if (text == "cubic") return ActivationSpec::polynomial({0.0, 0.0, 0.0, 1.0});
  if (text.rfind("poly:", 0) == 0) {
    std::vector<double> c;
    std::stringstream ss(text.substr(5));
    std::string item;
    while (std::getline(ss, item, ',')) c.push_back(std::stod(item));
    require(!c.empty(), "parse_activation: empty coefficient list");
    return ActivationSpec::polynomial(c);
  }
  fail(ErrorKind::InvalidArgument, "parse_activation: unknown activation '" + text + "'");
}

namespace {

double polynomial_moment(const Mat& cov, const std::vector<int>& samples, const std::vector<double>& c) {
  const int n = static_cast<int>(samples.size());
  const int deg = static_cast<int>(c.size()) - 1;
  if (n * deg > kMaxMomentOrder) {
    fail(ErrorKind::UnsupportedOrder, "activation moment of order " + std::to_string(n * deg) +
                                          " exceeds the Isserlis cap of " + std::to_string(kMaxMomentOrder));
  }
  double total = 0.0;
  std::vector<int> idx;
  idx.reserve(kMaxMomentOrder);
  std::function<void(int, double)> rec = [&](int j, double coef) {
    if (j == n) {
      if (idx.size() % 2 == 0) total += coef * isserlis_moment(cov, idx);
      return;
    }
    for (int k = 0; k <= deg; ++k) {
      if (c[k] == 0.0) continue;
      for (int r = 0; r < k; ++r) idx.push_back(samples[j]);
      rec(j + 1, coef * c[k]);
      idx.resize(idx.size() - k);
    }
  };
  rec(0, 1.0);
  return total;
}

}  // namespace

Estimate activation_moment(const Mat& cov, const std::vector<int>& samples, const ActivationSpec& act,
                           const ExpectationOptions& options) {
  if (samples.empty()) return {1.0, 0.0};
  if (act.is_polynomial()) return {polynomial_moment(cov, samples, act.polynomial_coefficients()), 0.0};
  // Group repeated samples so the quadrature dimension is the number of distinct samples.
  std::map<int, int> powers;
  for (int s : samples) ++powers[s];
  std::vector<int> distinct;
  std::vector<int> pw;
  for (auto [s, k] : powers) {
    distinct.push_back(s);
    pw.push_back(k);
  }
  const int m = static_cast<int>(distinct.size());
  // Independent groups (connected through nonzero covariance) factor exactly.
  std::vector<int> group(m, -1);
  int groups = 0;
  for (int a = 0; a < m; ++a) {
    if (group[a] >= 0) continue;
    std::vector<int> stack{a};
    group[a] = groups;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (int b = 0; b < m; ++b)
        if (group[b] < 0 && cov(distinct[u], distinct[b]) != 0.0) {
          group[b] = groups;
          stack.push_back(b);
        }
    }
    ++groups;
  }
  double value = 1.0;
  std::vector<Estimate> parts;
  for (int g = 0; g < groups; ++g) {
    std::vector<int> members;
    int count = 0;
    for (int a = 0; a < m; ++a)
      if (group[a] == g) {
        members.push_back(a);
        count += pw[a];
      }
    // h → −h leaves the Gaussian invariant and flips the sign of the integrand.
    if (act.is_odd() && count % 2 == 1) return {0.0, 0.0};
    const int k = static_cast<int>(members.size());
    Mat sub(k, k);
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b) sub(a, b) = cov(distinct[members[a]], distinct[members[b]]);
    const Estimate e = gaussian_expectation(
        sub,
        [&](const double* x) {
          double v = 1.0;
          for (int a = 0; a < k; ++a) v *= std::pow(act(x[a]), pw[members[a]]);
          return v;
        },
        options.qmc);
    parts.push_back(e);
    value *= e.value;
  }
  double var = 0.0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    double others = 1.0;
    for (std::size_t j = 0; j < parts.size(); ++j)
      if (j != i) others *= parts[j].value;
    var += others * others * parts[i].se * parts[i].se;
  }
  return {value, std::sqrt(var)};
}

Mat single_layer_gp(const Mat& gxx, double sigma1_sq, const ActivationSpec& act, Mat* se,
                    const ExpectationOptions& options) {
  require(gxx.rows() == gxx.cols(), "single_layer_gp: G_xx must be square");
  require(sigma1_sq > 0.0, "single_layer_gp: σ₁² must be positive");
  const int p = static_cast<int>(gxx.rows());
  const Mat cov = sigma1_sq * gxx;
  if (se) *se = Mat::Zero(p, p);
  if (act.is_linear()) return cov;
  Mat k(p, p);
  for (int mu = 0; mu < p; ++mu)
    for (int nu = mu; nu < p; ++nu) {
      const Estimate e = activation_moment(cov, {mu, nu}, act, options);
      k(mu, nu) = k(nu, mu) = e.value;
      if (se) (*se)(mu, nu) = (*se)(nu, mu) = e.se;
    }
  return k;
}

std::vector<Mat> deep_nonlinear_gp(const Mat& gxx, const WidthProfile& profile, const ActivationSpec& act,
                                   const ExpectationOptions& options) {
  profile.validate();
  std::vector<Mat> out;
  Mat prev = gxx;
  for (int l = 1; l <= profile.depth() - 1; ++l) {
    prev = single_layer_gp(prev, profile.variance(l), act, nullptr, options);
    out.push_back(prev);
  }
  return out;
}

// ---------------------------------------------------------------- skip connections

SkipConnectivity SkipConnectivity::chain(const WidthProfile& profile) {
  profile.validate();
  SkipConnectivity c;
  c.depth = profile.depth();
  c.sigma2 = Mat::Zero(c.depth + 1, c.depth + 1);
  for (int l = 1; l <= c.depth; ++l) c.sigma2(l, l - 1) = profile.variance(l);
  return c;
}

void SkipConnectivity::validate() const {
  require(depth >= 2, "SkipConnectivity: depth must be >= 2");
  require(sigma2.rows() == depth + 1 && sigma2.cols() == depth + 1, "SkipConnectivity: matrix must be (d+1)x(d+1)");
  for (int l = 1; l <= depth; ++l) {
    bool incoming = false;
    for (int lp = 0; lp < depth + 1; ++lp) {
      const double v = sigma2(l, lp);
      require(v >= 0.0, "SkipConnectivity: variances must be nonnegative");
      if (lp >= l) require(v == 0.0, "SkipConnectivity: edges must point forward");
      if (lp < l && v > 0.0) incoming = true;
    }
    require(incoming, "SkipConnectivity: layer " + std::to_string(l) + " has no incoming edge");
  }
}

double skip_gp_scale(const SkipConnectivity& conn, int layer, int tau) {
  conn.validate();
  require(layer >= 1 && layer <= conn.depth, "skip_gp_scale: layer out of range");
  require(tau >= 0 && tau < layer, "skip_gp_scale: need 0 <= tau < layer");
  // m²_{ℓ,0} = σ²_{ℓ,0};  m²_{ℓ,τ} = m²_{ℓ,τ-1} + m²_{τ,τ-1} σ²_{ℓ,τ}.
  std::vector<double> full(conn.depth + 1, 0.0);  // m²_{ℓ',ℓ'-1} for ℓ' < layer
  auto partial = [&](int l, int t) {
    double m = conn.edge(l, 0);
    for (int k = 1; k <= t; ++k) m += full[k] * conn.edge(l, k);
    return m;
  };
  for (int l = 1; l < layer; ++l) full[l] = partial(l, l - 1);
  return partial(layer, tau);
}

Mat skip_linear_gp(const Mat& gxx, const SkipConnectivity& conn, int layer) {
  return skip_gp_scale(conn, layer, layer - 1) * gxx;
}

}  // namespace fwbnn
