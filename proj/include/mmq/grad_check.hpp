#pragma once

#include "mmq/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>

namespace mmq {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t coords_per_param = 12;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  Eigen::Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

/// Compares analytic gradients against central differences at 64-bit.
///
/// `compute_grads` must accumulate the analytic gradient into each
/// parameter's `grad` (they are zeroed beforehand). `loss` must be a pure
/// function of the parameter values. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check_detailed(const std::function<double()>& loss, const std::function<void()>& compute_grads,
                                    std::span<Parameter<double>* const> params, const GradCheckOptions& opts = {});

double grad_check(const std::function<double()>& loss, const std::function<void()>& compute_grads,
                  std::span<Parameter<double>* const> params, const GradCheckOptions& opts = {});

}  // namespace mmq
