#pragma once

#include "mmq/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mmq {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Adaptive-moment optimizer with bias correction. Moments are bound to the
/// parameter order of the first step() call.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Applies one update to every parameter and zeroes their gradients.
  void step(std::span<Parameter<float>* const> params);

  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(float lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<MatrixF> m_;
  std::vector<MatrixF> v_;
};

}  // namespace mmq
