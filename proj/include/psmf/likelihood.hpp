#pragma once

#include "psmf/core.hpp"

#include <cmath>
#include <vector>

namespace psmf {

enum class NllMode { gaussian, robust, masked };

inline const char* to_string(NllMode mode) {
  switch (mode) {
    case NllMode::gaussian: return "gaussian";
    case NllMode::robust: return "robust";
    case NllMode::masked: return "masked";
  }
  return "unknown";
}

namespace detail {

/// theta-dependent part of the one-step negative log marginal likelihood obtained by integrating the
/// dictionary out of N(y; C z, eta I):
///   gaussian: d/2 log a + |e|^2 / (2a),  a = z'Vz + eta, e = y - Cz
///   masked:   1/2 sum_j log u_j + |e_obs|^2 / (2a),  u_j = eta + m_j z'Vz
///   robust:   m/2 log a + (lambda + m)/2 log(1 + |e_obs|^2 / (lambda a))
/// `rows` lists the observed dimensions (all of them in gaussian mode). When grad_z is given it
/// receives the gradient with respect to z.
inline double marginal_nll(const Vector& z, const Matrix& C, const Matrix& V, const Vector& y, double eta,
                           NllMode mode, const std::vector<Index>& rows, double lambda,
                           Vector* grad_z = nullptr) {
  const Index d = C.rows();
  const Vector Vz = V * z;
  const double a = z.dot(Vz) + eta;
  if (!(a > 0.0) || !std::isfinite(a))
    throw NumericalError(ErrorKind::numerical_divergence, "non-positive marginal variance in likelihood");

  Vector e;
  Matrix Co;
  if (mode == NllMode::gaussian) {
    e = y - C * z;
    Co = C;
  } else {
    Co = C(rows, Eigen::all);
    e = y(rows) - Co * z;
  }
  const double m = static_cast<double>(e.size());
  const double E = e.squaredNorm();

  double value = 0.0;
  switch (mode) {
    case NllMode::gaussian:
      value = 0.5 * static_cast<double>(d) * std::log(a) + 0.5 * E / a;
      if (grad_z) *grad_z = (static_cast<double>(d) / a - E / (a * a)) * Vz - Co.transpose() * e / a;
      break;
    case NllMode::masked: {
      if (!(eta > 0.0)) throw NumericalError(ErrorKind::numerical_divergence, "non-positive eta in masked likelihood");
      const double missing = static_cast<double>(d) - m;
      value = 0.5 * m * std::log(a) + 0.5 * missing * std::log(eta) + 0.5 * E / a;
      if (grad_z) *grad_z = (m / a - E / (a * a)) * Vz - Co.transpose() * e / a;
      break;
    }
    case NllMode::robust: {
      require(lambda > 0.0, "robust likelihood needs positive degrees of freedom");
      const double b = 1.0 + E / (lambda * a);
      value = 0.5 * m * std::log(a) + 0.5 * (lambda + m) * std::log(b);
      if (grad_z) {
        // db/dz = (dE a - E da) / (lambda a^2), dE = -2 Co'e, da = 2 Vz
        const Vector db = (-2.0 * a * (Co.transpose() * e) - 2.0 * E * Vz) / (lambda * a * a);
        *grad_z = (m / a) * Vz + (0.5 * (lambda + m) / b) * db;
      }
      break;
    }
  }
  if (!std::isfinite(value)) throw NumericalError(ErrorKind::numerical_divergence, "non-finite likelihood value");
  return value;
}

}  // namespace detail
}  // namespace psmf
