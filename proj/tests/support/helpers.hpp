#pragma once

#include "mmq/tensor.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace testing {

template <typename T = double>
mmq::Matrix<T> random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  mmq::Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
  return m;
}

inline double max_abs_diff(const mmq::MatrixD& a, const mmq::MatrixD& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace testing
