#include "fwbnn/network.hpp"

#include <cmath>

namespace fwbnn {

namespace {

Mat apply_activation(const ActivationSpec& act, const Mat& h) {
  if (act.kind == ActivationSpec::Kind::Relu) return h.cwiseMax(0.0);
  return h.unaryExpr([&](double v) { return act(v); });
}

Mat activation_derivative(const ActivationSpec& act, const Mat& h) {
  if (act.kind == ActivationSpec::Kind::Relu) return (h.array() > 0.0).cast<double>().matrix();
  return h.unaryExpr([&](double v) { return act.derivative(v); });
}

}  // namespace

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::MlpLinear: return "mlp-linear";
    case Architecture::MlpRelu: return "mlp-relu";
    case Architecture::SingleNonlinear: return "single-nonlinear";
    case Architecture::CnnLinear1d: return "cnn-linear-1d";
    case Architecture::CnnLinear2d: return "cnn-linear-2d";
  }
  return "?";
}

Architecture parse_architecture(const std::string& text) {
  if (text == "mlp-linear") return Architecture::MlpLinear;
  if (text == "mlp-relu") return Architecture::MlpRelu;
  if (text == "single-nonlinear") return Architecture::SingleNonlinear;
  if (text == "cnn-linear-1d") return Architecture::CnnLinear1d;
  if (text == "cnn-linear-2d") return Architecture::CnnLinear2d;
  fail(ErrorKind::InvalidArgument, "unknown architecture '" + text + "'");
}

ActivationSpec NetworkConfig::hidden_activation() const {
  if (arch == Architecture::MlpRelu) return ActivationSpec::relu();
  if (arch == Architecture::SingleNonlinear) return activation;
  return ActivationSpec::identity();
}

bool NetworkConfig::is_linear() const { return hidden_activation().is_linear(); }

void NetworkConfig::validate() const {
  profile.validate();
  const int d = profile.depth();
  require(input_dim >= 1, "network: input_dim must be >= 1");
  if (arch == Architecture::SingleNonlinear) require(d == 2, "network: single-nonlinear requires depth 2");
  if (skip) {
    require(arch == Architecture::MlpLinear, "network: skip connections are supported for mlp-linear only");
    require(skip->depth == d, "network: skip connectivity depth mismatch");
    skip->validate();
    for (int lp = 0; lp < d - 1; ++lp)
      require(skip->edge(d, lp) == 0.0, "network: the readout must connect to layer d-1 only");
  }
  if (is_cnn()) {
    const int q = arch == Architecture::CnnLinear1d ? 1 : 2;
    require(shape.dims() == q, "network: spatial shape must have " + std::to_string(q) + " axes");
    for (int e : shape.extents) require(e >= 1, "network: spatial extents must be positive");
    require(static_cast<int>(filters.size()) == d - 1, "network: need one filter per hidden layer");
    for (const FilterSpec& f : filters) {
      require(f.dims == q, "network: filter dimensionality mismatch");
      f.validate(shape);
    }
    if (readout.kind == Readout::Kind::Projection)
      require(readout.u.size() == shape.sites(), "network: projection vector length must equal the number of sites");
  }
}

Network::Network(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  const WidthProfile& pr = config_.profile;
  const int d = pr.depth();
  auto width = [&](int l) -> int { return l == 0 ? config_.input_dim : static_cast<int>(pr.width(l)); };
  auto add = [&](int rows, int cols, int layer, int source, int tap, double var) {
    ParameterBlock b;
    b.offset = count_;
    b.rows = rows;
    b.cols = cols;
    b.layer = layer;
    b.source = source;
    b.tap = tap;
    b.prior_variance = var;
    blocks_.push_back(b);
    count_ += b.size();
  };
  for (int l = 1; l <= d - 1; ++l) {
    if (config_.is_cnn()) {
      const FilterSpec& f = config_.filters[l - 1];
      for (int t = 0; t < f.taps(); ++t) add(width(l), width(l - 1), l, l - 1, t, pr.variance(l) * f.weights[t]);
    } else if (config_.skip) {
      for (int lp = 0; lp < l; ++lp) {
        const double v = config_.skip->edge(l, lp);
        if (v > 0.0) add(width(l), width(lp), l, lp, 0, v);
      }
    } else {
      add(width(l), width(l - 1), l, l - 1, 0, pr.variance(l));
    }
  }
  int features = width(d - 1);
  if (config_.is_cnn() && config_.readout.kind == Readout::Kind::Vectorization) features *= config_.sites();
  add(width(d), features, d, d - 1, 0, pr.variance(d));
}

Vec Network::prior_variances() const {
  Vec v(count_);
  for (const ParameterBlock& b : blocks_) v.segment(b.offset, b.size()).setConstant(b.prior_variance);
  return v;
}

Vec Network::sample_prior(Philox& rng) const {
  Vec theta(count_);
  rng.fill_normal(theta.data(), static_cast<std::size_t>(count_));
  for (const ParameterBlock& b : blocks_) theta.segment(b.offset, b.size()) *= std::sqrt(b.prior_variance);
  return theta;
}

Eigen::Map<const Mat> Network::block(const Vec& theta, const ParameterBlock& b) const {
  return Eigen::Map<const Mat>(theta.data() + b.offset, b.rows, b.cols);
}

double Network::readout_scale() const {
  return 1.0 / std::sqrt(static_cast<double>(blocks_.back().cols));
}

Mat Network::input_activation(const Mat& x) const {
  require(x.cols() == config_.input_width(), "network: input has " + std::to_string(x.cols()) +
                                                 " columns, expected " + std::to_string(config_.input_width()));
  if (!config_.is_cnn()) return x;
  const int s = config_.sites();
  const int p = static_cast<int>(x.rows());
  Mat a(p * s, config_.input_dim);
  for (int mu = 0; mu < p; ++mu)
    for (int i = 0; i < config_.input_dim; ++i)
      for (int q = 0; q < s; ++q) a(mu * s + q, i) = x(mu, i * s + q);
  return a;
}

std::vector<std::vector<int>> Network::shift_tables(int layer, int p) const {
  const FilterSpec& f = config_.filters[layer - 1];
  const int s = config_.sites();
  std::vector<std::vector<int>> tables(f.taps(), std::vector<int>(static_cast<std::size_t>(p) * s));
  for (int t = 0; t < f.taps(); ++t) {
    const std::vector<int> off = f.offset(t);
    for (int a = 0; a < s; ++a) {
      const int src = config_.shape.shifted(a, off);
      for (int mu = 0; mu < p; ++mu) tables[t][mu * s + a] = mu * s + src;
    }
  }
  return tables;
}

Mat Network::readout_features(const Mat& act, int p) const {
  if (!config_.is_cnn()) return act;
  const int s = config_.sites();
  const int n = static_cast<int>(act.cols());
  if (config_.readout.kind == Readout::Kind::Vectorization) {
    Mat f(p, static_cast<Eigen::Index>(n) * s);
    for (int mu = 0; mu < p; ++mu)
      for (int i = 0; i < n; ++i)
        for (int a = 0; a < s; ++a) f(mu, i * s + a) = act(mu * s + a, i);
    return f;
  }
  Mat f = Mat::Zero(p, n);
  for (int mu = 0; mu < p; ++mu)
    for (int a = 0; a < s; ++a) f.row(mu) += config_.readout.u(a) * act.row(mu * s + a);
  return f;
}

void Network::readout_features_adjoint(const Mat& gf, int p, Mat& ga) const {
  if (!config_.is_cnn()) {
    ga = gf;
    return;
  }
  const int s = config_.sites();
  const int n = static_cast<int>(blocks_[blocks_.size() - 2].rows);
  ga.resize(static_cast<Eigen::Index>(p) * s, n);
  if (config_.readout.kind == Readout::Kind::Vectorization) {
    for (int mu = 0; mu < p; ++mu)
      for (int i = 0; i < n; ++i)
        for (int a = 0; a < s; ++a) ga(mu * s + a, i) = gf(mu, i * s + a);
    return;
  }
  for (int mu = 0; mu < p; ++mu)
    for (int a = 0; a < s; ++a) ga.row(mu * s + a) = config_.readout.u(a) * gf.row(mu);
}

ForwardResult Network::forward(const Vec& theta, const Mat& x) const {
  require(theta.size() == count_, "network: parameter vector has wrong length");
  const int d = config_.profile.depth();
  const int p = static_cast<int>(x.rows());
  const ActivationSpec act = config_.hidden_activation();
  const bool linear = act.is_linear();
  ForwardResult r;
  std::vector<Mat> psi;  // psi[l] for l = 0..d-1
  psi.push_back(input_activation(x));
  std::size_t bi = 0;
  for (int l = 1; l <= d - 1; ++l) {
    const long nl = config_.profile.width(l);
    Mat h = Mat::Zero(psi[0].rows(), nl);
    if (config_.is_cnn()) {
      const auto tables = shift_tables(l, p);
      const Mat& prev = psi[l - 1];
      const double scale = 1.0 / std::sqrt(static_cast<double>(prev.cols()));
      Mat shifted(prev.rows(), prev.cols());
      for (std::size_t t = 0; t < tables.size(); ++t, ++bi) {
        for (Eigen::Index row = 0; row < prev.rows(); ++row) shifted.row(row) = prev.row(tables[t][row]);
        h.noalias() += scale * shifted * block(theta, blocks_[bi]).transpose();
      }
    } else {
      while (bi < blocks_.size() && blocks_[bi].layer == l) {
        const ParameterBlock& b = blocks_[bi++];
        const Mat& src = psi[b.source];
        h.noalias() += (1.0 / std::sqrt(static_cast<double>(src.cols()))) * src * block(theta, b).transpose();
      }
    }
    Mat a = linear ? h : apply_activation(act, h);
    r.kernels.push_back(symmetrize(a * a.transpose() / static_cast<double>(nl)));
    r.preactivations.push_back(std::move(h));
    psi.push_back(a);
    r.activations.push_back(std::move(a));
  }
  r.readout_features = readout_features(psi[d - 1], p);
  r.outputs = readout_scale() * r.readout_features * block(theta, blocks_.back()).transpose();
  return r;
}

double Network::energy(const Vec& theta, const Mat& x, const Mat& y) const {
  const ForwardResult r = forward(theta, x);
  require(y.rows() == r.outputs.rows() && y.cols() == r.outputs.cols(), "network: target shape mismatch");
  return 0.5 * (r.outputs - y).squaredNorm();
}

double Network::energy_gradient(const Vec& theta, const Mat& x, const Mat& y, Vec& grad,
                                ForwardResult* out) const {
  ForwardResult local;
  ForwardResult& r = out ? *out : local;
  r = forward(theta, x);
  require(y.rows() == r.outputs.rows() && y.cols() == r.outputs.cols(), "network: target shape mismatch");
  const int d = config_.profile.depth();
  const int p = static_cast<int>(x.rows());
  const ActivationSpec act = config_.hidden_activation();
  const bool linear = act.is_linear();
  grad.setZero(count_);
  auto gblock = [&](const ParameterBlock& b) { return Eigen::Map<Mat>(grad.data() + b.offset, b.rows, b.cols); };

  const Mat gout = r.outputs - y;
  const ParameterBlock& rb = blocks_.back();
  gblock(rb) = readout_scale() * gout.transpose() * r.readout_features;
  const Mat gfeat = readout_scale() * gout * block(theta, rb);

  const Mat in = input_activation(x);
  auto activation = [&](int l) -> const Mat& { return l == 0 ? in : r.activations[l - 1]; };
  std::vector<Mat> gpsi(d);
  readout_features_adjoint(gfeat, p, gpsi[d - 1]);
  for (int l = d - 1; l >= 1; --l) {
    if (gpsi[l].size() == 0) continue;  // layer feeds nothing downstream
    Mat gh = gpsi[l];
    std::vector<std::vector<int>> tables;
    if (config_.is_cnn()) tables = shift_tables(l, p);
    if (!linear) {
      const Mat& h = r.preactivations[l - 1];
      gh.array() *= activation_derivative(act, h).array();
    }
    for (std::size_t bi = 0; bi + 1 < blocks_.size(); ++bi) {
      const ParameterBlock& b = blocks_[bi];
      if (b.layer != l) continue;
      const Mat& src = activation(b.source);
      const double scale = 1.0 / std::sqrt(static_cast<double>(src.cols()));
      if (b.source > 0 && gpsi[b.source].size() == 0) gpsi[b.source] = Mat::Zero(src.rows(), src.cols());
      if (config_.is_cnn()) {
        const std::vector<int>& tab = tables[b.tap];
        Mat shifted(src.rows(), src.cols());
        for (Eigen::Index row = 0; row < src.rows(); ++row) shifted.row(row) = src.row(tab[row]);
        gblock(b) = scale * gh.transpose() * shifted;
        if (b.source > 0) {
          const Mat back = scale * gh * block(theta, b);
          for (Eigen::Index row = 0; row < src.rows(); ++row) gpsi[b.source].row(tab[row]) += back.row(row);
        }
      } else {
        gblock(b) = scale * gh.transpose() * src;
        if (b.source > 0) gpsi[b.source].noalias() += scale * gh * block(theta, b);
      }
    }
  }
  return 0.5 * gout.squaredNorm();
}

Mat Network::readout_kernel_of(const Mat& last_kernel, int p) const {
  if (!config_.is_cnn()) return last_kernel;
  FourIndexKernel k;
  k.p = p;
  k.shape = config_.shape;
  k.flat = last_kernel;
  return readout_kernel(k, config_.readout);
}

Mat wishart_factor(int q, long n, Philox& rng) {
  require(q >= 1 && n >= 1, "wishart_factor: need q >= 1 and n >= 1");
  if (n < q) {
    Mat z(q, n);
    rng.fill_normal(z.data(), static_cast<std::size_t>(z.size()));
    return z;
  }
  Mat a = Mat::Zero(q, q);
  for (int i = 0; i < q; ++i) {
    a(i, i) = std::sqrt(rng.chi_square(static_cast<double>(n - i)));
    for (int j = 0; j < i; ++j) a(i, j) = rng.normal();
  }
  return a;
}

Mat Dataset::gyy() const {
  require(y.rows() >= 1 && y.cols() >= 1, "dataset: empty targets");
  return symmetrize(y * y.transpose() / static_cast<double>(y.cols()));
}

PriorKernelSampler::PriorKernelSampler(const NetworkConfig& config, const Mat& x, KernelDrawMethod method)
    : config_(config), x_(x), method_(method) {
  config_.validate();
  require(x.cols() == config_.input_width(), "prior kernel sampler: input width mismatch");
  if (method_ == KernelDrawMethod::Weights) {
    net_.emplace(config_);
    return;
  }
  if (config_.is_cnn()) {
    const FourIndexKernel k4 = cnn_input_gram(x, config_.input_dim, config_.shape);
    base_ = k4.flat;
    first_lower_ = psd_factor(cnn_propagate(k4, config_.filters[0], config_.profile.variance(1)).flat);
  } else {
    base_ = symmetrize(x * x.transpose() / static_cast<double>(config_.input_dim));
    const double v = config_.skip ? config_.skip->edge(1, 0) : config_.profile.variance(1);
    first_lower_ = psd_factor(v * base_);
  }
}

Mat PriorKernelSampler::readout_kernel_of(const Mat& last_kernel) const {
  if (!config_.is_cnn()) return last_kernel;
  FourIndexKernel k;
  k.p = samples();
  k.shape = config_.shape;
  k.flat = last_kernel;
  return readout_kernel(k, config_.readout);
}

std::vector<Mat> PriorKernelSampler::draw(Philox& rng, bool negate) const {
  if (method_ == KernelDrawMethod::Weights) {
    Vec theta = net_->sample_prior(rng);
    if (negate) theta = -theta;
    return net_->forward(theta, x_).kernels;
  }
  const WidthProfile& pr = config_.profile;
  const int d = pr.depth();
  const int p = samples();
  const ActivationSpec act = config_.hidden_activation();
  const bool linear = act.is_linear();
  std::vector<Mat> all;  // all[l] = K^{(l)}
  all.reserve(d);
  all.push_back(base_);
  FourIndexKernel k4;
  if (config_.is_cnn()) {
    k4.p = p;
    k4.shape = config_.shape;
  }
  for (int l = 1; l <= d - 1; ++l) {
    const long n = pr.width(l);
    Mat lower;
    if (l == 1) {
      lower = first_lower_;
    } else if (config_.is_cnn()) {
      k4.flat = all[l - 1];
      lower = psd_factor(cnn_propagate(k4, config_.filters[l - 1], pr.variance(l)).flat);
    } else if (config_.skip) {
      Mat cov = Mat::Zero(p, p);
      for (int lp = 0; lp < l; ++lp)
        if (config_.skip->edge(l, lp) > 0.0) cov += config_.skip->edge(l, lp) * all[lp];
      lower = psd_factor(cov);
    } else {
      lower = psd_factor(pr.variance(l) * all[l - 1]);
    }
    const int q = static_cast<int>(lower.rows());
    Mat k;
    if (linear) {
      const Mat b = lower * wishart_factor(q, n, rng);
      k = b * b.transpose() / static_cast<double>(n);
    } else {
      Mat z(q, n);
      rng.fill_normal(z.data(), static_cast<std::size_t>(z.size()));
      if (negate) z = -z;
      const Mat a = apply_activation(act, lower * z);
      k = a * a.transpose() / static_cast<double>(n);
    }
    all.push_back(symmetrize(k));
  }
  all.erase(all.begin());
  return all;
}

std::vector<Mat> sample_prior_kernels(const NetworkConfig& config, const Mat& x, Philox& rng,
                                      KernelDrawMethod method, bool negate) {
  return PriorKernelSampler(config, x, method).draw(rng, negate);
}

}  // namespace fwbnn
