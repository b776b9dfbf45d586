#include "fwbnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <locale>
#include <sstream>

namespace fwbnn {

std::size_t IdxTensor::item_size() const {
  std::size_t n = 1;
  for (std::size_t i = 1; i < dims.size(); ++i) n *= dims[i];
  return n;
}

Vec IdxTensor::item(std::size_t i) const {
  require(i < count(), "idx: item index out of range");
  const std::size_t m = item_size();
  Vec v(static_cast<Eigen::Index>(m));
  for (std::size_t j = 0; j < m; ++j) v(static_cast<Eigen::Index>(j)) = bytes[i * m + j] / 255.0;
  return v;
}

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& d, std::size_t off) {
  return (static_cast<std::uint32_t>(d[off]) << 24) | (static_cast<std::uint32_t>(d[off + 1]) << 16) |
         (static_cast<std::uint32_t>(d[off + 2]) << 8) | static_cast<std::uint32_t>(d[off + 3]);
}

void write_be32(std::vector<std::uint8_t>& d, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) d.push_back(static_cast<std::uint8_t>((v >> shift) & 0xff));
}

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

IdxTensor parse_idx(const std::vector<std::uint8_t>& data, std::optional<std::uint32_t> expected_magic) {
  if (data.size() < 4) fail(ErrorKind::FormatError, "idx: truncated header at byte offset 0");
  IdxTensor t;
  t.magic = read_be32(data, 0);
  if (t.magic != kIdxImagesMagic && t.magic != kIdxLabelsMagic) {
    fail(ErrorKind::FormatError, "idx: bad magic " + hex(t.magic) + " at byte offset 0");
  }
  if (expected_magic && t.magic != *expected_magic) {
    fail(ErrorKind::FormatError,
         "idx: magic " + hex(t.magic) + " at byte offset 0, expected " + hex(*expected_magic));
  }
  const std::size_t ndims = t.magic & 0xff;
  std::size_t off = 4;
  for (std::size_t i = 0; i < ndims; ++i) {
    if (data.size() < off + 4) {
      fail(ErrorKind::FormatError, "idx: truncated dimensions at byte offset " + std::to_string(off));
    }
    t.dims.push_back(read_be32(data, off));
    off += 4;
  }
  std::size_t payload = 1;
  for (std::uint32_t d : t.dims) payload *= d;
  if (data.size() < off + payload) {
    fail(ErrorKind::FormatError, "idx: truncated payload at byte offset " + std::to_string(data.size()) +
                                     " (need " + std::to_string(off + payload) + " bytes)");
  }
  if (data.size() > off + payload) {
    fail(ErrorKind::FormatError, "idx: trailing bytes at byte offset " + std::to_string(off + payload));
  }
  t.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(off), data.end());
  return t;
}

IdxTensor load_idx(const std::string& path, std::optional<std::uint32_t> expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::InvalidArgument, "idx: cannot open " + path);
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx(data, expected_magic);
}

std::vector<std::uint8_t> serialize_idx(const IdxTensor& t) {
  require(t.dims.size() == (t.magic & 0xff), "idx: dimension count does not match the magic");
  std::size_t payload = 1;
  for (std::uint32_t d : t.dims) payload *= d;
  require(payload == t.bytes.size(), "idx: payload size does not match the dimensions");
  std::vector<std::uint8_t> out;
  out.reserve(4 + 4 * t.dims.size() + payload);
  write_be32(out, t.magic);
  for (std::uint32_t d : t.dims) write_be32(out, d);
  out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

void write_idx(const std::string& path, const IdxTensor& t) {
  const std::vector<std::uint8_t> data = serialize_idx(t);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::InvalidArgument, "idx: cannot write " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

// ---------------------------------------------------------------- downsampling

namespace {

// W(I, i) = |[i, i+1) ∩ [I·r, (I+1)·r)| / r with r = source/target.
Mat box_weights(int source, int target) {
  const double r = static_cast<double>(source) / target;
  Mat w = Mat::Zero(target, source);
  for (int big = 0; big < target; ++big) {
    const double lo = big * r, hi = (big + 1) * r;
    for (int i = static_cast<int>(std::floor(lo)); i < source && i < hi; ++i) {
      const double overlap = std::min<double>(hi, i + 1) - std::max<double>(lo, i);
      if (overlap > 0.0) w(big, i) = overlap / r;
    }
  }
  return w;
}

}  // namespace

Mat downsample(const Mat& image, int target) {
  require(image.rows() == image.cols() && image.rows() >= 1, "downsample: image must be square");
  require(target >= 1, "downsample: target must be >= 1");
  require(target <= image.rows(), "downsample: target larger than the source");
  const Mat w = box_weights(static_cast<int>(image.rows()), target);
  return w * image * w.transpose();
}

Mat downsample_images(const IdxTensor& images, int target, const std::vector<std::size_t>& indices) {
  require(images.dims.size() == 3 && images.dims[1] == images.dims[2], "downsample: need square images");
  const int side = static_cast<int>(images.dims[1]);
  const Mat w = box_weights(side, target);
  Mat out(static_cast<Eigen::Index>(indices.size()), target * target);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Vec v = images.item(indices[r]);
    const Mat img = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        v.data(), side, side);
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> small = w * img * w.transpose();
    out.row(static_cast<Eigen::Index>(r)) = Eigen::Map<const Vec>(small.data(), target * target).transpose();
  }
  return out;
}

// ---------------------------------------------------------------- tasks

Task build_task(const IdxTensor& images, const IdxTensor& labels, int p, TaskOrdering ordering, int side,
                int classes) {
  require(!images.is_labels() && images.dims.size() == 3, "build_task: images must be an image IDX tensor");
  require(labels.is_labels() && labels.dims.size() == 1, "build_task: labels must be a label IDX tensor");
  require(images.count() == labels.count(), "build_task: image and label counts differ");
  require(p >= 1, "build_task: p must be >= 1");
  require(static_cast<std::size_t>(p) <= images.count(), "build_task: p exceeds the number of available samples");
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.count(); ++i) {
    const int c = labels.bytes[i];
    require(c < classes, "build_task: label out of range");
    by_class[c].push_back(i);
  }
  std::vector<std::size_t> picked;
  std::vector<int> picked_labels;
  std::vector<std::size_t> cursor(classes, 0);
  while (static_cast<int>(picked.size()) < p) {
    bool any = false;
    for (int c = 0; c < classes && static_cast<int>(picked.size()) < p; ++c) {
      if (cursor[c] < by_class[c].size()) {
        picked.push_back(by_class[c][cursor[c]++]);
        picked_labels.push_back(c);
        any = true;
      }
    }
    if (!any) break;
  }
  if (ordering == TaskOrdering::ClassSorted) {
    std::vector<std::size_t> order(picked.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return picked_labels[a] < picked_labels[b];
    });
    std::vector<std::size_t> idx;
    std::vector<int> lab;
    for (std::size_t o : order) {
      idx.push_back(picked[o]);
      lab.push_back(picked_labels[o]);
    }
    picked = std::move(idx);
    picked_labels = std::move(lab);
  }
  Task t;
  t.indices = picked;
  t.labels = picked_labels;
  t.data.x = downsample_images(images, side, picked);
  t.data.y = Mat::Zero(p, classes);
  for (int i = 0; i < p; ++i) t.data.y(i, picked_labels[i]) = 1.0;
  t.gxx = symmetrize(t.data.x * t.data.x.transpose() / static_cast<double>(t.data.x.cols()));
  t.gyy = t.data.gyy();
  return t;
}

std::string to_string(TeacherKind kind) {
  switch (kind) {
    case TeacherKind::RandomLinear: return "random-linear";
    case TeacherKind::RandomRotation: return "random-rotation";
    case TeacherKind::PrescribedGyy: return "prescribed";
  }
  return "?";
}

TeacherKind parse_teacher(const std::string& text) {
  if (text == "random-linear") return TeacherKind::RandomLinear;
  if (text == "random-rotation") return TeacherKind::RandomRotation;
  if (text == "prescribed") return TeacherKind::PrescribedGyy;
  fail(ErrorKind::InvalidArgument, "unknown teacher '" + text + "'");
}

Task synthetic_task(std::uint64_t seed, int n0, int p, int nd, const Teacher& teacher) {
  require(n0 >= 1 && p >= 1 && nd >= 1, "synthetic_task: n0, p and n_d must be >= 1");
  Philox rng(seed, 0x7a5cull);
  Task t;
  t.data.x.resize(p, n0);
  for (Eigen::Index i = 0; i < t.data.x.size(); ++i) t.data.x.data()[i] = rng.normal();
  switch (teacher.kind) {
    case TeacherKind::RandomLinear: {
      Mat w(n0, nd);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
      t.data.y = t.data.x * w / std::sqrt(static_cast<double>(n0));
      break;
    }
    case TeacherKind::RandomRotation: {
      require(nd <= n0, "synthetic_task: random-rotation needs n_d <= n0");
      Mat g(n0, n0);
      for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
      Eigen::HouseholderQR<Mat> qr(g);
      Mat q = qr.householderQ();
      const Vec diag = Mat(qr.matrixQR()).diagonal();
      for (int j = 0; j < n0; ++j)
        if (diag(j) < 0.0) q.col(j) = -q.col(j);  // Haar measure
      t.data.y = t.data.x * q.leftCols(nd);
      break;
    }
    case TeacherKind::PrescribedGyy: {
      require(teacher.gyy.rows() == p && teacher.gyy.cols() == p, "synthetic_task: prescribed G_yy must be p x p");
      check_gram(teacher.gyy, "synthetic_task: prescribed G_yy");
      const Spectrum sp = eigendecompose(symmetrize(teacher.gyy));
      const double top = std::max(sp.eigenvalues(0), 1.0);
      for (int i = nd; i < p; ++i) {
        require(sp.eigenvalues(i) <= kPsdTol * top, "synthetic_task: prescribed G_yy has rank above n_d");
      }
      const int r = std::min(nd, p);
      t.data.y = Mat::Zero(p, nd);
      for (int i = 0; i < r; ++i)
        t.data.y.col(i) = sp.eigenvectors.col(i) * std::sqrt(std::max(sp.eigenvalues(i), 0.0) * nd);
      break;
    }
  }
  t.gxx = symmetrize(t.data.x * t.data.x.transpose() / static_cast<double>(n0));
  t.gyy = t.data.gyy();
  return t;
}

// ---------------------------------------------------------------- CSV

void write_csv(std::ostream& out, const std::vector<std::string>& header, const Mat& rows) {
  require(header.empty() || static_cast<Eigen::Index>(header.size()) == rows.cols(),
          "write_csv: header size does not match the columns");
  out.imbue(std::locale::classic());
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  if (!header.empty()) out << '\n';
  out << std::setprecision(9);
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < rows.cols(); ++c) out << (c ? "," : "") << rows(r, c);
    out << '\n';
  }
}

void write_csv(const std::string& path, const std::vector<std::string>& header, const Mat& rows) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::InvalidArgument, "write_csv: cannot write " + path);
  write_csv(out, header, rows);
}

void write_dataset_csv(const std::string& path, const Dataset& data) {
  require(data.x.rows() == data.y.rows(), "write_dataset_csv: X and Y row counts differ");
  std::vector<std::string> header;
  for (Eigen::Index i = 0; i < data.x.cols(); ++i) header.push_back("x" + std::to_string(i));
  for (Eigen::Index i = 0; i < data.y.cols(); ++i) header.push_back("y" + std::to_string(i));
  Mat rows(data.x.rows(), data.x.cols() + data.y.cols());
  rows << data.x, data.y;
  write_csv(path, header, rows);
}

}  // namespace fwbnn
