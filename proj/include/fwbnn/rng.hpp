#ifndef FWBNN_RNG_HPP
#define FWBNN_RNG_HPP

#include <array>
#include <cstddef>
#include <cstdint>

namespace fwbnn {

// Philox4x32-10 counter-based generator. A (seed, stream) pair names an
// independent sequence; the position inside it is the block counter.
class Philox {
 public:
  Philox(std::uint64_t seed, std::uint64_t stream, std::uint64_t block = 0);

  std::array<std::uint32_t, 4> block(std::uint64_t index) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  // Uniform on the open interval (0, 1), 53-bit resolution.
  double uniform();
  double normal();
  double gamma(double shape);
  double chi_square(double dof);

  // Standard normals with 32-bit uniform resolution, two per half block.
  void fill_normal(double* out, std::size_t n);

 private:
  void refill();

  std::uint32_t key_[2];
  std::uint64_t stream_;
  std::uint64_t counter_;
  std::array<std::uint32_t, 4> buf_{};
  int pos_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);
// Stream identifier for a (major, minor) pair, e.g. (chain, step) or (draw, layer).
std::uint64_t stream_id(std::uint64_t major, std::uint64_t minor);

}  // namespace fwbnn

#endif
