#pragma once

#include "psmf/filter.hpp"

#include <algorithm>

namespace psmf {

/// Robust (Student-t) filter state. The latent scale variable is marginalized analytically; its only
/// traces are the degrees of freedom and the evolved noise covariances in base.noise.
struct RobustState {
  FilterState base;
  double lambda = 1.0;
  double lambda0 = 1.0;

  static RobustState initial(const NoiseConfig& noise, const SubspaceModel& model, double lambda0) {
    require(lambda0 > 0.0, "lambda0 must be positive");
    return RobustState{FilterState::initial(noise, model), lambda0, lambda0};
  }

  const Matrix& Q_current() const { return base.noise.Q; }
  const Matrix& R_current() const { return base.noise.R; }
};

inline constexpr double kScaleFactorFloor = 1e-8;
inline constexpr double kScaleFactorCeil = 1e8;

/// omega = (lambda + e' S^-1 e) / (lambda + d) with e = y - C mu_bar.
inline double coefficient_scale_factor(const Vector& y, const Matrix& C_prev, const Vector& mu_bar, const Matrix& S,
                                       double lambda_prev) {
  require(S.rows() == y.size() && S.cols() == y.size(), "S must be d x d");
  require(lambda_prev > 0.0, "degrees of freedom must be positive");
  const Vector e = y - C_prev * mu_bar;
  Eigen::PartialPivLU<Matrix> lu(S);
  detail::check_rcond(lu.rcond(), "innovation covariance");
  const double delta2 = e.dot(lu.solve(e));
  return (lambda_prev + delta2) / (lambda_prev + static_cast<double>(y.size()));
}

/// phi = (lambda + |e|^2 / rho) / (lambda + d) with rho = mu_bar' V mu_bar + eta.
inline double dictionary_scale_factor(const Vector& y, const Matrix& C_prev, const Vector& mu_bar, const Matrix& V_prev,
                                      double eta, double lambda_prev) {
  require(lambda_prev > 0.0, "degrees of freedom must be positive");
  const double rho = mu_bar.dot(V_prev * mu_bar) + eta;
  if (!(rho > 0.0)) throw NumericalError(ErrorKind::numerical_singularity, "dictionary scale denominator is not positive");
  const Vector e = y - C_prev * mu_bar;
  return (lambda_prev + e.squaredNorm() / rho) / (lambda_prev + static_cast<double>(y.size()));
}

struct RobustStepResult {
  RobustState state;
  FilterTraceEntry trace;
};

namespace detail {

inline double clamp_scale(double v, bool& clamped) {
  const double c = std::clamp(v, kScaleFactorFloor, kScaleFactorCeil);
  if (c != v) clamped = true;
  return c;
}

}  // namespace detail

/// One rPSMF step. Means follow PSMF; P_k is scaled by omega_k, V_k by phi_k, and Q, R are
/// multiplied by omega_k. Degrees of freedom grow by the number of observed entries.
inline RobustStepResult robust_filter_step(const RobustState& state, const SubspaceModel& model, const Vector& y,
                                           const std::optional<MaskVector>& mask = std::nullopt) {
  const FilterState& base = state.base;
  detail::StepPieces p = detail::step_pieces(base, model, y, mask);

  RobustStepResult out{state, FilterTraceEntry{}};
  FilterTraceEntry& tr = out.trace;
  tr.k = base.k + 1;
  tr.observed_count = static_cast<Index>(p.rows.size());
  tr.predictive_mean = p.yhat;
  tr.predictive_var = p.yvar;
  tr.lambda = state.lambda;
  out.state.base.k = base.k + 1;

  if (p.rows.empty()) {
    tr.eta = compute_eta(p.Ceff, p.pred.P_bar, base.noise.R);
    out.state.base.coef = CoefficientPosterior{p.pred.mu_bar, p.pred.P_bar};
    return out;
  }

  const double m = static_cast<double>(p.rows.size());
  const double lambda = state.lambda;
  tr.eta = compute_eta(p.Ceff, p.pred.P_bar, base.noise.R, mask);

  DictionaryPosterior dict = update_dictionary(base.dict, p.z, y, tr.eta, mask);
  auto cu = detail::coefficient_update(base.dict, p.pred.mu_bar, p.pred.P_bar, y, base.noise.R, p.rows,
                                       model.projection());

  const double rho = p.spread + tr.eta;
  bool clamped = false;
  const double phi = detail::clamp_scale((lambda + cu.residual.squaredNorm() / rho) / (lambda + m), clamped);
  const double omega = detail::clamp_scale((lambda + cu.mahalanobis) / (lambda + m), clamped);

  dict.col_cov *= phi;
  cu.posterior.cov *= omega;
  out.state.base.dict = std::move(dict);
  out.state.base.coef = std::move(cu.posterior);
  out.state.base.noise.Q = omega * base.noise.Q;
  out.state.base.noise.R = omega * base.noise.R;
  out.state.lambda = lambda + m;

  tr.innovation_norm = cu.residual.norm();
  tr.omega = omega;
  tr.phi = phi;
  tr.lambda = out.state.lambda;
  tr.scale_clamped = clamped;
  tr.nll_increment = detail::marginal_nll(p.z, base.dict.mean, base.dict.col_cov, y, tr.eta, NllMode::robust,
                                          p.rows, lambda);
  return out;
}

}  // namespace psmf
