#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace psmf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using MaskVector = Eigen::Matrix<bool, Eigen::Dynamic, 1>;
using MaskMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class ErrorKind {
  contract,
  numerical_singularity,
  numerical_divergence,
  empty_observation,
  discretization,
  parse,
  config,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::contract: return "contract";
    case ErrorKind::numerical_singularity: return "numerical_singularity";
    case ErrorKind::numerical_divergence: return "numerical_divergence";
    case ErrorKind::empty_observation: return "empty_observation";
    case ErrorKind::discretization: return "discretization";
    case ErrorKind::parse: return "parse";
    case ErrorKind::config: return "config";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ErrorKind::contract, what) {}
};

class NumericalError : public Error {
 public:
  NumericalError(ErrorKind kind, const std::string& what, double condition = 0.0)
      : Error(kind, what), condition_(condition) {}
  /// Reciprocal-condition based estimate; 0 when not applicable.
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(ErrorKind::parse, "line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(ErrorKind::config, "config field '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

// ---------------------------------------------------------------------------
// Domain containers
// ---------------------------------------------------------------------------

/// Observations in dimension-major layout: rows are observed dimensions, columns time steps.
struct DataMatrix {
  Matrix values;
  MaskMatrix mask;  // true = observed

  Index dims() const { return values.rows(); }
  Index steps() const { return values.cols(); }

  static DataMatrix fully_observed(Matrix values) {
    MaskMatrix mask = MaskMatrix::Constant(values.rows(), values.cols(), true);
    return DataMatrix{std::move(values), std::move(mask)};
  }

  Index observed_count() const { return mask.count(); }

  void validate() const {
    require(values.rows() >= 1 && values.cols() >= 1, "data matrix must have d >= 1 and n >= 1");
    require(mask.rows() == values.rows() && mask.cols() == values.cols(), "mask shape must match values");
    for (Index j = 0; j < values.cols(); ++j)
      for (Index i = 0; i < values.rows(); ++i)
        if (mask(i, j) && !std::isfinite(values(i, j)))
          throw ContractError("non-finite observed value at dimension " + std::to_string(i) + ", step " +
                              std::to_string(j));
  }
};

/// N(vec(C); vec(mean), col_cov (x) I_d)
struct DictionaryPosterior {
  Matrix mean;     // d x r
  Matrix col_cov;  // r x r
};

struct CoefficientPosterior {
  Vector mean;
  Matrix cov;
};

struct NoiseConfig {
  Matrix Q;   // coefficient process noise
  Matrix R;   // observation noise
  Matrix P0;
  Matrix V0;
  Vector mu0;
  Matrix C0;
};

// ---------------------------------------------------------------------------
// Covariance hygiene
// ---------------------------------------------------------------------------

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline Matrix symmetrize_spd(const Matrix& m) {
  if (!m.allFinite()) throw NumericalError(ErrorKind::numerical_divergence, "non-finite covariance entries");
  Matrix out = 0.5 * (m + m.transpose());
  return out;
}

inline bool is_symmetric(const Matrix& m) {
  return m.rows() == m.cols() && (m - m.transpose()).cwiseAbs().maxCoeff() == 0.0;
}

/// Smallest eigenvalue must not fall below -rel_floor * trace.
inline bool is_psd(const Matrix& m, double rel_floor = 1e-10) {
  if (m.size() == 0) return true;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double scale = std::max(std::abs(m.trace()), 1e-300);
  return es.eigenvalues().minCoeff() >= -rel_floor * scale;
}

inline bool is_diagonal(const Matrix& m) {
  if (m.rows() != m.cols()) return false;
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i)
      if (i != j && m(i, j) != 0.0) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Observation patterns
// ---------------------------------------------------------------------------

/// Indices of observed rows. An absent mask means all rows are observed.
inline std::vector<Index> observed_rows(Index d, const std::optional<MaskVector>& mask) {
  std::vector<Index> rows;
  rows.reserve(static_cast<std::size_t>(d));
  if (mask) require(mask->size() == d, "mask length must equal observation dimension");
  for (Index i = 0; i < d; ++i)
    if (!mask || (*mask)(i)) rows.push_back(i);
  return rows;
}

// ---------------------------------------------------------------------------
// Innovation covariance S = L Pbar L^T + D, solved without forming S^-1
// ---------------------------------------------------------------------------

namespace detail {

inline void check_rcond(double rcond, const char* what) {
  if (!(rcond > 1e-15)) {
    const double cond = rcond > 0 ? 1.0 / rcond : std::numeric_limits<double>::infinity();
    throw NumericalError(ErrorKind::numerical_singularity,
                         std::string(what) + " is numerically singular (condition estimate " +
                             std::to_string(cond) + ")",
                         cond);
  }
}

}  // namespace detail

/// (C Pbar C^T + diag(Rdiag))^{-1} B via the push-through form of the Woodbury identity:
///   D^-1 B - D^-1 C Pbar (I + C^T D^-1 C Pbar)^-1 C^T D^-1 B.
/// Only an r x r system is factorized, and Pbar may be singular.
inline Matrix woodbury_solve(const Matrix& C, const Matrix& Pbar, const Vector& Rdiag, const Matrix& B) {
  require(C.rows() == Rdiag.size() && C.rows() == B.rows(), "woodbury: row dimension mismatch");
  require(Pbar.rows() == C.cols() && Pbar.cols() == C.cols(), "woodbury: Pbar must be r x r");
  require((Rdiag.array() > 0.0).all(), "woodbury: diagonal noise must be strictly positive");

  const Vector dinv = Rdiag.cwiseInverse();
  const Matrix dinv_b = dinv.asDiagonal() * B;
  if (C.cols() == 0) return dinv_b;
  const Matrix dinv_c = dinv.asDiagonal() * C;
  const Matrix inner = Matrix::Identity(C.cols(), C.cols()) + C.transpose() * dinv_c * Pbar;
  Eigen::PartialPivLU<Matrix> lu(inner);
  detail::check_rcond(lu.rcond(), "Woodbury inner system");
  return dinv_b - dinv_c * (Pbar * lu.solve(C.transpose() * dinv_b));
}

inline Vector woodbury_apply(const Matrix& C, const Matrix& Pbar, const Vector& Rdiag, const Vector& v) {
  return woodbury_solve(C, Pbar, Rdiag, Matrix(v)).col(0);
}

/// S = L Pbar L^T + R + spread * I on a set of observed rows. Uses the Woodbury path whenever
/// R is diagonal; the dense LU path otherwise.
class InnovationCovariance {
 public:
  InnovationCovariance(const Matrix& loading, const Matrix& Pbar, const Matrix& R, double spread)
      : loading_(loading), Pbar_(Pbar) {
    require(R.rows() == loading.rows() && R.cols() == loading.rows(), "innovation: R shape mismatch");
    if (is_diagonal(R)) {
      diag_noise_ = R.diagonal().array() + spread;
    } else {
      Matrix S = loading * Pbar * loading.transpose() + R;
      S.diagonal().array() += spread;
      dense_.compute(S);
      detail::check_rcond(dense_.rcond(), "innovation covariance");
    }
  }

  bool uses_woodbury() const { return diag_noise_.has_value(); }

  Matrix solve(const Matrix& B) const {
    if (diag_noise_) return woodbury_solve(loading_, Pbar_, *diag_noise_, B);
    return dense_.solve(B);
  }

  Vector solve(const Vector& b) const { return solve(Matrix(b)).col(0); }

  /// diag(S) without forming S.
  Vector diagonal(const Matrix& R, double spread) const {
    const Matrix LP = loading_ * Pbar_;
    Vector out = (LP.array() * loading_.array()).rowwise().sum().matrix() + R.diagonal();
    out.array() += spread;
    return out;
  }

 private:
  Matrix loading_;
  Matrix Pbar_;
  std::optional<Vector> diag_noise_;
  Eigen::PartialPivLU<Matrix> dense_;
};

}  // namespace psmf
