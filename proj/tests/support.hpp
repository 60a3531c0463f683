#pragma once

#include "etegrec/autograd.hpp"
#include "etegrec/nn.hpp"

#include <cmath>
#include <functional>
#include <random>

namespace testsupport {

using etegrec::ag::Matrix;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Central differences of f with respect to every entry of `x`.
inline Matrix numeric_gradient(Matrix& x, const std::function<double()>& f, double h = 1e-5) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f();
    x.data()[i] = keep - h;
    const double down = f();
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Norm-wise relative error; both-zero counts as exact agreement.
inline double relative_error(const Matrix& analytic, const Matrix& numeric) {
  const double denom = std::max(analytic.norm(), numeric.norm());
  if (denom < 1e-12) return 0.0;
  return (analytic - numeric).norm() / denom;
}

}  // namespace testsupport
