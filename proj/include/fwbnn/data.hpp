#ifndef FWBNN_DATA_HPP
#define FWBNN_DATA_HPP

#include "fwbnn/network.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace fwbnn {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Unsigned-byte IDX tensor.
struct IdxTensor {
  std::uint32_t magic = kIdxImagesMagic;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;

  std::size_t count() const { return dims.empty() ? 0 : dims[0]; }
  std::size_t item_size() const;
  // Item i (e.g. one image, row-major) scaled to [0, 1].
  Vec item(std::size_t i) const;
  bool is_labels() const { return magic == kIdxLabelsMagic; }
};

IdxTensor parse_idx(const std::vector<std::uint8_t>& data, std::optional<std::uint32_t> expected_magic = std::nullopt);
IdxTensor load_idx(const std::string& path, std::optional<std::uint32_t> expected_magic = std::nullopt);
std::vector<std::uint8_t> serialize_idx(const IdxTensor& t);
void write_idx(const std::string& path, const IdxTensor& t);

// Exact area-average box filter from an h×h image to target×target.
Mat downsample(const Mat& image, int target);
// Row i of the result is image i downsampled and flattened row-major.
Mat downsample_images(const IdxTensor& images, int target, const std::vector<std::size_t>& indices);

enum class TaskOrdering { ClassSorted, Selection };

struct Task {
  Dataset data;
  Mat gxx;
  Mat gyy;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // source rows
};

// Takes samples round-robin over classes (first unused sample of each class in file
// order), then orders them by class. Inputs are downsampled to side×side, targets one-hot.
Task build_task(const IdxTensor& images, const IdxTensor& labels, int p, TaskOrdering ordering = TaskOrdering::ClassSorted,
                int side = 10, int classes = 10);

enum class TeacherKind { RandomLinear, RandomRotation, PrescribedGyy };
std::string to_string(TeacherKind kind);
TeacherKind parse_teacher(const std::string& text);

struct Teacher {
  TeacherKind kind = TeacherKind::RandomLinear;
  Mat gyy;  // PrescribedGyy only
};

// X has i.i.d. N(0,1) entries, so G_xx = XXᵀ/n₀ concentrates at I.
//  random-linear:   Y = X W/√n₀, W i.i.d. N(0,1)
//  random-rotation: Y = first n_d columns of X Q for a Haar-random orthogonal Q (n_d ≤ n₀)
//  prescribed:      Y with YYᵀ/n_d = G_yy (needs rank G_yy ≤ n_d)
Task synthetic_task(std::uint64_t seed, int n0, int p, int nd, const Teacher& teacher = {});

// CSV with a header row, '.' decimals and 9 significant digits.
void write_csv(std::ostream& out, const std::vector<std::string>& header, const Mat& rows);
void write_csv(const std::string& path, const std::vector<std::string>& header, const Mat& rows);
void write_dataset_csv(const std::string& path, const Dataset& data);

}  // namespace fwbnn

#endif
