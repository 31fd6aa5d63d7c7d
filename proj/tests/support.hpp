#pragma once

#include "psmf/core.hpp"

#include <random>

namespace psmf::test {

using Rng = std::mt19937_64;

inline Matrix random_matrix(Rng& rng, Index rows, Index cols, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

inline Vector random_vector(Rng& rng, Index n, double scale = 1.0) { return random_matrix(rng, n, 1, scale).col(0); }

inline Matrix random_spd(Rng& rng, Index n, double ridge = 0.1) {
  const Matrix B = random_matrix(rng, n, n);
  return B * B.transpose() / static_cast<double>(n) + ridge * Matrix::Identity(n, n);
}

inline Vector random_positive(Rng& rng, Index n, double lo = 0.1, double hi = 2.0) {
  std::uniform_real_distribution<double> unif(lo, hi);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = unif(rng);
  return v;
}

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline Index uniform_index(Rng& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

inline double rel_err(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

inline double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace psmf::test
