#ifndef FWBNN_COMMON_HPP
#define FWBNN_COMMON_HPP

#include <Eigen/Dense>

#include <functional>
#include <stdexcept>
#include <string>

namespace fwbnn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class ErrorKind {
  InvalidArgument,
  UnsupportedOrder,
  SingularMatrix,
  DivergentSeries,
  NeedsFiniteTemperature,
  UnsupportedReadout,
  ResourceLimit,
  ConvergenceFailure,
  FormatError,
  Divergence,
  ConfigError,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);
void require(bool condition, const std::string& message);

// Non-fatal diagnostics (ill-conditioning, low effective sample size).
// The default handler writes to stderr.
using WarningHandler = std::function<void(const std::string&)>;
void set_warning_handler(WarningHandler handler);
void warn(const std::string& message);

}  // namespace fwbnn

#endif
