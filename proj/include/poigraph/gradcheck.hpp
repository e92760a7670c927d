#pragma once

// Finite-difference verification of analytic gradients. Double precision
// only; float does not have the headroom for central differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "poigraph/params.hpp"

namespace poigraph {

// The checked function runs a forward+backward pass over `params`,
// accumulating analytic gradients into the store, and returns the scalar
// loss. It must be deterministic (evaluating twice gives identical values).
using GradCheckFn = std::function<double(ParamStore<double>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline GradCheckReport grad_check(const GradCheckFn& f, ParamStore<double>& params,
                                  double epsilon = 1e-5) {
  if (!(epsilon > 0)) throw ConfigError("grad_check: epsilon must be positive");
  for (auto& e : params.entries()) {
    e.grad = Tensor<double>(e.value.shape());
    e.grad_populated = false;
  }
  const double base = f(params);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");

  // Snapshot analytic gradients, then clear so probe evaluations do not
  // accumulate on top of them.
  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.entries().size());
  for (auto& e : params.entries()) {
    analytic.push_back(e.grad);
    e.grad = Tensor<double>(e.value.shape());
    e.grad_populated = false;
  }

  GradCheckReport report;
  size_t pi = 0;
  for (auto& e : params.entries()) {
    const int64_t n = e.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double w0 = e.value.at(i);
      e.value.mut()[i] = w0 + epsilon;
      const double f_plus = f(params);
      e.value.mut()[i] = w0 - epsilon;
      const double f_minus = f(params);
      e.value.mut()[i] = w0;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        throw NumericError("grad_check: non-finite probe at " + e.name);
      }
      const double numeric = (f_plus - f_minus) / (2.0 * epsilon);
      const double a = analytic[pi].at(i);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-12});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = e.name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
      // Clear accumulation from the probe evaluations.
      for (auto& pe : params.entries()) {
        if (pe.grad_populated) {
          pe.grad = Tensor<double>(pe.value.shape());
          pe.grad_populated = false;
        }
      }
    }
    ++pi;
  }
  // Restore analytic gradients so callers can keep using them.
  pi = 0;
  for (auto& e : params.entries()) {
    e.grad = analytic[pi++];
    e.grad_populated = true;
  }
  return report;
}

}  // namespace poigraph
