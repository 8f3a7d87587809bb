#pragma once

#include <Eigen/Core>

#include <stdexcept>

#include "aikd/tensor.hpp"

namespace aikd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline Matrix to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("to_matrix: expected a rank-2 tensor, got " + t.shape_string());
  Matrix m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

inline Tensor to_tensor(const Matrix& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  std::copy(m.data(), m.data() + m.size(), t.data.begin());
  return t;
}

}  // namespace aikd
