#include "fwbnn/common.hpp"

#include <iostream>
#include <mutex>

namespace fwbnn {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::UnsupportedOrder: return "unsupported-order";
    case ErrorKind::SingularMatrix: return "singular-matrix";
    case ErrorKind::DivergentSeries: return "divergent-series";
    case ErrorKind::NeedsFiniteTemperature: return "needs-finite-temperature";
    case ErrorKind::UnsupportedReadout: return "unsupported-readout";
    case ErrorKind::ResourceLimit: return "resource-limit";
    case ErrorKind::ConvergenceFailure: return "convergence-failure";
    case ErrorKind::FormatError: return "format-error";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::ConfigError: return "config-error";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

void require(bool condition, const std::string& message) {
  if (!condition) throw Error(ErrorKind::InvalidArgument, message);
}

namespace {
std::mutex g_warn_mutex;
WarningHandler g_warn_handler;
}  // namespace

void set_warning_handler(WarningHandler handler) {
  std::lock_guard<std::mutex> lock(g_warn_mutex);
  g_warn_handler = std::move(handler);
}

void warn(const std::string& message) {
  std::lock_guard<std::mutex> lock(g_warn_mutex);
  if (g_warn_handler) {
    g_warn_handler(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

}  // namespace fwbnn
