#include "mmq/optim.hpp"

#include <cmath>

namespace mmq {

void Adam::step(std::span<Parameter<float>* const> params) {
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.push_back(MatrixF::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(MatrixF::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) throw ShapeError("adam: parameter count changed between steps");
  ++step_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_));
  const float step_size = static_cast<float>(cfg_.lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (p.value.rows() != m_[i].rows() || p.value.cols() != m_[i].cols() || p.grad.rows() != p.value.rows() ||
        p.grad.cols() != p.value.cols())
      throw ShapeError("adam: shape mismatch for parameter '" + p.name + "'");
    m_[i] = cfg_.beta1 * m_[i] + (1.0f - cfg_.beta1) * p.grad;
    v_[i] = cfg_.beta2 * v_[i] + (1.0f - cfg_.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bc2 + cfg_.eps);
    p.zero_grad();
  }
}

}  // namespace mmq
