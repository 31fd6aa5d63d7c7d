#pragma once

#include "psmf/core.hpp"

#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

namespace psmf {

enum class ModelKind { random_walk, linear, cosine_periodic, sin_cos_periodic, gp_matern32, custom };

inline const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::random_walk: return "random_walk";
    case ModelKind::linear: return "linear";
    case ModelKind::cosine_periodic: return "cosine_periodic";
    case ModelKind::sin_cos_periodic: return "sin_cos_periodic";
    case ModelKind::gp_matern32: return "gp_matern32";
    case ModelKind::custom: return "custom";
  }
  return "unknown";
}

/// Matern-3/2 hyperparameters; nu is fixed at 3/2 and kappa = sqrt(3) / ell.
struct GPMaternParams {
  double sigma2 = 1.0;
  double ell = 1.0;
  double gamma = 1.0;
  Index r = 1;

  double kappa() const { return std::sqrt(3.0) / ell; }

  Matrix drift() const {
    const double k = kappa();
    Matrix F(2, 2);
    F << 0.0, 1.0, -k * k, -2.0 * k;
    return F;
  }

  Matrix stationary_cov() const {
    Matrix P = Matrix::Zero(2, 2);
    P(0, 0) = sigma2;
    P(1, 1) = 3.0 * sigma2 / (ell * ell);
    return P;
  }

  void validate() const {
    require(sigma2 > 0 && ell > 0 && gamma > 0 && r >= 1, "GP hyperparameters must be positive");
  }
};

struct GPDiscretization {
  Matrix A;  // 2r x 2r
  Matrix Q;  // 2r x 2r
  Matrix H;  // r x 2r
};

/// Transition f_theta(x, k) for user-supplied subspace models.
using TransitionFn = std::function<Vector(const Vector& theta, const Vector& x, long k)>;
using TransitionJacobianFn = std::function<Matrix(const Vector& theta, const Vector& x, long k)>;

/// A coefficient transition model f_theta with its parameter vector and projection floor.
/// Immutable: parameter updates go through with_theta().
class SubspaceModel {
 public:
  static SubspaceModel random_walk(Index dim) {
    SubspaceModel m(ModelKind::random_walk, dim);
    return m;
  }

  /// f(x) = A x with theta = vec(A) (column-major), unconstrained.
  static SubspaceModel linear(const Matrix& A) {
    require(A.rows() == A.cols() && A.rows() >= 1, "linear model needs a square transition matrix");
    SubspaceModel m(ModelKind::linear, A.rows());
    m.theta_ = A.reshaped();
    m.lower_ = Vector::Constant(m.theta_.size(), -std::numeric_limits<double>::infinity());
    return m;
  }

  /// f_i(x, k) = cos(2 pi theta_i k + x_i), theta_i >= 0.
  static SubspaceModel cosine_periodic(const Vector& theta) {
    require(theta.size() >= 1, "cosine model needs one frequency per coordinate");
    SubspaceModel m(ModelKind::cosine_periodic, theta.size());
    m.theta_ = theta;
    m.lower_ = Vector::Zero(theta.size());
    return m;
  }

  /// f_i(x, k) = t1 sin(2 pi t2 k + t3 x_i) + t4 cos(2 pi t5 k + t6 x_i), shared theta in R^6_+.
  static SubspaceModel sin_cos_periodic(const Vector& theta, Index dim) {
    require(theta.size() == 6, "sin/cos model takes exactly six parameters");
    require(dim >= 1, "sin/cos model dimension must be positive");
    SubspaceModel m(ModelKind::sin_cos_periodic, dim);
    m.theta_ = theta;
    m.lower_ = Vector::Zero(6);
    return m;
  }

  static SubspaceModel gp_matern32(const GPMaternParams& params);

  static SubspaceModel custom(Index dim, Vector theta, TransitionFn f, TransitionJacobianFn jac = {},
                              std::optional<Vector> lower = std::nullopt) {
    require(static_cast<bool>(f), "custom model needs a transition function");
    SubspaceModel m(ModelKind::custom, dim);
    m.lower_ = lower ? *lower : Vector::Constant(theta.size(), -std::numeric_limits<double>::infinity());
    require(m.lower_.size() == theta.size(), "custom model bounds must match theta");
    m.theta_ = std::move(theta);
    m.custom_f_ = std::make_shared<TransitionFn>(std::move(f));
    if (jac) m.custom_jac_ = std::make_shared<TransitionJacobianFn>(std::move(jac));
    return m;
  }

  ModelKind kind() const { return kind_; }
  const Vector& theta() const { return theta_; }
  const Vector& lower_bounds() const { return lower_; }
  Index state_dim() const { return state_dim_; }
  /// Number of dictionary columns the state maps onto (r); differs from state_dim for GP models.
  Index feature_dim() const { return H_ ? H_->rows() : state_dim_; }
  /// Observation projection H (GP models only).
  const Matrix* projection() const { return H_ ? &*H_ : nullptr; }
  /// Model-implied process noise (GP models only).
  const Matrix* process_noise() const { return Qmodel_ ? &*Qmodel_ : nullptr; }
  /// Fixed transition matrix for linear and GP models.
  Matrix transition_matrix() const {
    if (kind_ == ModelKind::linear) return theta_.reshaped(state_dim_, state_dim_);
    if (kind_ == ModelKind::gp_matern32) return *A_;
    if (kind_ == ModelKind::random_walk) return Matrix::Identity(state_dim_, state_dim_);
    throw ContractError("model has no fixed transition matrix");
  }

  SubspaceModel with_theta(const Vector& theta) const {
    require(theta.size() == theta_.size(), "theta dimension mismatch");
    require(theta.allFinite(), "theta must be finite");
    SubspaceModel m = *this;
    m.theta_ = theta;
    return m;
  }

  SubspaceModel with_lower_bounds(const Vector& lower) const {
    require(lower.size() == theta_.size(), "bounds dimension mismatch");
    SubspaceModel m = *this;
    m.lower_ = lower;
    return m;
  }

  const TransitionFn* custom_transition() const { return custom_f_.get(); }
  const TransitionJacobianFn* custom_jacobian() const { return custom_jac_.get(); }

 private:
  SubspaceModel(ModelKind kind, Index dim) : kind_(kind), state_dim_(dim) {}

  ModelKind kind_;
  Index state_dim_;
  Vector theta_{Vector::Zero(0)};
  Vector lower_{Vector::Zero(0)};
  std::optional<Matrix> A_;
  std::optional<Matrix> Qmodel_;
  std::optional<Matrix> H_;
  std::shared_ptr<const TransitionFn> custom_f_;
  std::shared_ptr<const TransitionJacobianFn> custom_jac_;
};

// ---------------------------------------------------------------------------
// Matrix exponential
// ---------------------------------------------------------------------------

/// expm(M) by scaling and squaring around a fixed order-18 Taylor polynomial.
/// The scaled matrix has 1-norm <= 1/2, so the truncation term is below 1e-22 relative.
inline Matrix matrix_exponential(const Matrix& M) {
  require(M.rows() == M.cols(), "matrix exponential needs a square matrix");
  if (!M.allFinite()) throw NumericalError(ErrorKind::numerical_divergence, "matrix exponential of non-finite input");
  const Index n = M.rows();
  const double norm = n == 0 ? 0.0 : M.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Matrix A = M / std::ldexp(1.0, squarings);

  constexpr int kOrder = 18;
  // Horner: I + A(I + A/2(I + A/3(...)))
  Matrix result = Matrix::Identity(n, n);
  for (int j = kOrder; j >= 1; --j) result = Matrix::Identity(n, n) + (A * result) / static_cast<double>(j);
  for (int s = 0; s < squarings; ++s) result = result * result;

  if (!result.allFinite()) throw NumericalError(ErrorKind::numerical_divergence, "matrix exponential overflowed");
  return result;
}

namespace detail {

inline Matrix kron_identity(Index r, const Matrix& block) {
  Matrix out = Matrix::Zero(r * block.rows(), r * block.cols());
  for (Index i = 0; i < r; ++i) out.block(i * block.rows(), i * block.cols(), block.rows(), block.cols()) = block;
  return out;
}

}  // namespace detail

/// Discretize the Matern-3/2 SDE with step gamma and stack r independent copies.
inline GPDiscretization gp_discretize(const GPMaternParams& p) {
  p.validate();
  const Matrix Ai = matrix_exponential(p.gamma * p.drift());
  const Matrix Pinf = p.stationary_cov();
  const Matrix Qi = symmetrize_spd(Pinf - Ai * Pinf * Ai.transpose());

  Eigen::SelfAdjointEigenSolver<Matrix> es(Qi, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-12 * p.sigma2)
    throw NumericalError(ErrorKind::discretization, "discretized GP process noise is indefinite");

  Matrix Hi(1, 2);
  Hi << 1.0, 0.0;
  return GPDiscretization{detail::kron_identity(p.r, Ai), detail::kron_identity(p.r, Qi),
                          detail::kron_identity(p.r, Hi)};
}

inline SubspaceModel SubspaceModel::gp_matern32(const GPMaternParams& params) {
  GPDiscretization disc = gp_discretize(params);
  SubspaceModel m(ModelKind::gp_matern32, 2 * params.r);
  m.A_ = std::move(disc.A);
  m.Qmodel_ = std::move(disc.Q);
  m.H_ = std::move(disc.H);
  return m;
}

// ---------------------------------------------------------------------------
// Transition evaluation
// ---------------------------------------------------------------------------

namespace detail {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline Vector eval_with_theta(const SubspaceModel& model, const Vector& theta, const Vector& x, long k) {
  require(x.size() == model.state_dim(), "state dimension mismatch for transition");
  const double kk = static_cast<double>(k);
  switch (model.kind()) {
    case ModelKind::random_walk:
      return x;
    case ModelKind::linear:
      return theta.reshaped(x.size(), x.size()) * x;
    case ModelKind::gp_matern32:
      return model.transition_matrix() * x;
    case ModelKind::cosine_periodic:
      return (kTwoPi * kk * theta.array() + x.array()).cos().matrix();
    case ModelKind::sin_cos_periodic: {
      const Eigen::ArrayXd a = kTwoPi * theta(1) * kk + theta(2) * x.array();
      const Eigen::ArrayXd b = kTwoPi * theta(4) * kk + theta(5) * x.array();
      return (theta(0) * a.sin() + theta(3) * b.cos()).matrix();
    }
    case ModelKind::custom: {
      Vector out = (*model.custom_transition())(theta, x, k);
      require(out.size() == x.size(), "custom transition returned wrong dimension");
      return out;
    }
  }
  throw ContractError("unknown model kind");
}

/// Central differences with step h_i = max(base, base * |x_i|).
template <typename Fn>
Matrix central_difference_jacobian(Fn&& fn, const Vector& x, double base) {
  const Vector f0 = fn(x);
  Matrix J(f0.size(), x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const double h = std::max(base, base * std::abs(x(i)));
    Vector xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    J.col(i) = (fn(xp) - fn(xm)) / (xp(i) - xm(i));
  }
  return J;
}

}  // namespace detail

inline Vector eval_f(const SubspaceModel& model, const Vector& x, long k) {
  return detail::eval_with_theta(model, model.theta(), x, k);
}

/// F = df/dx at x.
inline Matrix jacobian_f(const SubspaceModel& model, const Vector& x, long k) {
  require(x.size() == model.state_dim(), "state dimension mismatch for Jacobian");
  const Vector& th = model.theta();
  const double kk = static_cast<double>(k);
  switch (model.kind()) {
    case ModelKind::random_walk:
      return Matrix::Identity(x.size(), x.size());
    case ModelKind::linear:
    case ModelKind::gp_matern32:
      return model.transition_matrix();
    case ModelKind::cosine_periodic:
      return (-(detail::kTwoPi * kk * th.array() + x.array()).sin()).matrix().asDiagonal();
    case ModelKind::sin_cos_periodic: {
      const Eigen::ArrayXd a = detail::kTwoPi * th(1) * kk + th(2) * x.array();
      const Eigen::ArrayXd b = detail::kTwoPi * th(4) * kk + th(5) * x.array();
      return (th(0) * th(2) * a.cos() - th(3) * th(5) * b.sin()).matrix().asDiagonal();
    }
    case ModelKind::custom:
      if (model.custom_jacobian()) return (*model.custom_jacobian())(th, x, k);
      return detail::central_difference_jacobian(
          [&](const Vector& xx) { return detail::eval_with_theta(model, th, xx, k); }, x, 1e-6);
  }
  throw ContractError("unknown model kind");
}

/// df/dtheta at (theta, x, k); state_dim x dim(theta). Analytic for built-in kinds.
inline Matrix theta_jacobian(const SubspaceModel& model, const Vector& theta, const Vector& x, long k) {
  require(x.size() == model.state_dim(), "state dimension mismatch for parameter Jacobian");
  const Index s = x.size();
  const double kk = static_cast<double>(k);
  switch (model.kind()) {
    case ModelKind::random_walk:
    case ModelKind::gp_matern32:
      return Matrix::Zero(s, 0);
    case ModelKind::linear: {
      // f_i = sum_j A_ij x_j, theta index of A_ij is i + j*s
      Matrix J = Matrix::Zero(s, s * s);
      for (Index j = 0; j < s; ++j)
        for (Index i = 0; i < s; ++i) J(i, i + j * s) = x(j);
      return J;
    }
    case ModelKind::cosine_periodic: {
      const Eigen::ArrayXd arg = detail::kTwoPi * kk * theta.array() + x.array();
      return (-(arg.sin()) * detail::kTwoPi * kk).matrix().asDiagonal();
    }
    case ModelKind::sin_cos_periodic: {
      const Eigen::ArrayXd a = detail::kTwoPi * theta(1) * kk + theta(2) * x.array();
      const Eigen::ArrayXd b = detail::kTwoPi * theta(4) * kk + theta(5) * x.array();
      Matrix J(s, 6);
      J.col(0) = a.sin().matrix();
      J.col(1) = (theta(0) * a.cos() * detail::kTwoPi * kk).matrix();
      J.col(2) = (theta(0) * a.cos() * x.array()).matrix();
      J.col(3) = b.cos().matrix();
      J.col(4) = (-theta(3) * b.sin() * detail::kTwoPi * kk).matrix();
      J.col(5) = (-theta(3) * b.sin() * x.array()).matrix();
      return J;
    }
    case ModelKind::custom:
      return detail::central_difference_jacobian(
          [&](const Vector& t) { return detail::eval_with_theta(model, t, x, k); }, theta, 1e-7);
  }
  throw ContractError("unknown model kind");
}

}  // namespace psmf
