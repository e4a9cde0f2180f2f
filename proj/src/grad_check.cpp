#include "mmq/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mmq {

GradCheckResult grad_check_detailed(const std::function<double()>& loss, const std::function<void()>& compute_grads,
                                    std::span<Parameter<double>* const> params, const GradCheckOptions& opts) {
  if (!(opts.eps >= 1e-6 && opts.eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-3]");
  for (auto* p : params) p->zero_grad();
  compute_grads();

  std::mt19937_64 rng(opts.seed);
  GradCheckResult res;
  auto eval = [&] {
    const double v = loss();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };
  eval();

  for (auto* p : params) {
    const Eigen::Index n = p->value.size();
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(n));
    std::iota(coords.begin(), coords.end(), Eigen::Index{0});
    if (opts.coords_per_param > 0 && coords.size() > opts.coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.coords_per_param);
    }
    for (Eigen::Index idx : coords) {
      double& x = p->value.data()[idx];
      const double orig = x;
      x = orig + opts.eps;
      const double up = eval();
      x = orig - opts.eps;
      const double down = eval();
      x = orig;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double analytic = p->grad.data()[idx];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++res.coords_checked;
      if (rel > res.max_rel_err || res.worst_index < 0) {
        res.max_rel_err = rel;
        res.worst_param = p->name;
        res.worst_index = idx;
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

double grad_check(const std::function<double()>& loss, const std::function<void()>& compute_grads,
                  std::span<Parameter<double>* const> params, const GradCheckOptions& opts) {
  return grad_check_detailed(loss, compute_grads, params, opts).max_rel_err;
}

}  // namespace mmq
