#pragma once

#include "psmf/core.hpp"
#include "psmf/likelihood.hpp"
#include "psmf/subspace.hpp"

#include <optional>
#include <vector>

namespace psmf {

struct FilterState {
  DictionaryPosterior dict;
  CoefficientPosterior coef;
  NoiseConfig noise;  // current Q_k and R_k live here
  long k = 0;         // index of the last assimilated step

  static FilterState initial(const NoiseConfig& noise, const SubspaceModel& model) {
    const Index s = model.state_dim();
    const Index r = model.feature_dim();
    const Index d = noise.C0.rows();
    require(d >= 1, "C0 must have at least one row");
    require(noise.C0.cols() == r, "C0 must be d x r with r = " + std::to_string(r));
    require(noise.V0.rows() == r && noise.V0.cols() == r, "V0 must be r x r");
    require(noise.mu0.size() == s, "mu0 must match the model state dimension");
    require(noise.P0.rows() == s && noise.P0.cols() == s, "P0 must match the model state dimension");
    require(noise.Q.rows() == s && noise.Q.cols() == s, "Q must match the model state dimension");
    require(noise.R.rows() == d && noise.R.cols() == d, "R must be d x d");
    return FilterState{DictionaryPosterior{noise.C0, symmetrize_spd(noise.V0)},
                       CoefficientPosterior{noise.mu0, symmetrize_spd(noise.P0)}, noise, 0};
  }

  Index dims() const { return dict.mean.rows(); }
};

struct FilterTraceEntry {
  long k = 0;
  double eta = 0.0;
  double innovation_norm = 0.0;
  double nll_increment = 0.0;
  Vector predictive_mean;
  Vector predictive_var;
  Index observed_count = 0;
  // robust variant only
  double omega = 1.0;
  double phi = 1.0;
  double lambda = 0.0;
  bool scale_clamped = false;
};

struct Prediction {
  Vector mu_bar;
  Matrix P_bar;
  Matrix F;
};

/// EKF prediction: mu_bar = f(mu_{k-1}, k), P_bar = F P F' + Q with F evaluated at mu_{k-1}.
inline Prediction predict(const FilterState& state, const SubspaceModel& model) {
  const long k = state.k + 1;
  Vector mu_bar = eval_f(model, state.coef.mean, k);
  if (!mu_bar.allFinite()) throw NumericalError(ErrorKind::numerical_divergence, "transition produced non-finite mean");
  Matrix F = jacobian_f(model, state.coef.mean, k);
  Matrix P_bar = symmetrize_spd(F * state.coef.cov * F.transpose() + state.noise.Q);
  return Prediction{std::move(mu_bar), std::move(P_bar), std::move(F)};
}

/// eta = Tr(M R M' + M C Pbar C' M') / m, the constant-diagonal KL projection of the dictionary
/// likelihood covariance. Without a mask m = d.
inline double compute_eta(const Matrix& C_prev, const Matrix& P_bar, const Matrix& R,
                          const std::optional<MaskVector>& mask = std::nullopt) {
  const auto rows = observed_rows(C_prev.rows(), mask);
  if (rows.empty()) throw Error(ErrorKind::empty_observation, "eta requires at least one observed entry");
  const Matrix Co = C_prev(rows, Eigen::all);
  const double spread = ((Co * P_bar).array() * Co.array()).sum();
  double noise = 0.0;
  for (Index i : rows) noise += R(i, i);
  return (noise + spread) / static_cast<double>(rows.size());
}

/// Rank-one matrix-variate update of the dictionary posterior given predictive mean z (in
/// dictionary-column space). Masked-out rows of the mean are left untouched; the column covariance
/// uses the unmasked formula.
inline DictionaryPosterior update_dictionary(const DictionaryPosterior& dict, const Vector& mu_bar, const Vector& y,
                                             double eta, const std::optional<MaskVector>& mask = std::nullopt) {
  require(mu_bar.size() == dict.col_cov.rows(), "dictionary update: mu_bar must have r entries");
  require(y.size() == dict.mean.rows(), "dictionary update: observation has wrong dimension");
  const Vector Vz = dict.col_cov * mu_bar;
  const double denom = mu_bar.dot(Vz) + eta;
  if (!(denom > 0.0))
    throw NumericalError(ErrorKind::numerical_singularity, "dictionary update denominator is not positive");

  DictionaryPosterior out;
  out.col_cov = symmetrize_spd(dict.col_cov - (Vz * Vz.transpose()) / denom);
  out.mean = dict.mean;
  const Vector gain = dict.col_cov.transpose() * mu_bar / denom;
  for (Index i : observed_rows(dict.mean.rows(), mask)) {
    const double residual = y(i) - dict.mean.row(i).dot(mu_bar);
    out.mean.row(i) += residual * gain.transpose();
  }
  return out;
}

namespace detail {

inline Matrix effective_loading(const Matrix& C, const Matrix* projection) {
  return projection ? Matrix(C * *projection) : C;
}

inline Vector projected(const Vector& mu, const Matrix* projection) {
  return projection ? Vector(*projection * mu) : mu;
}

struct CoefficientUpdate {
  CoefficientPosterior posterior;
  double mahalanobis = 0.0;  // e' S^-1 e over observed rows
  Vector residual;           // observed rows only
};

inline CoefficientUpdate coefficient_update(const DictionaryPosterior& dict_prev, const Vector& mu_bar,
                                            const Matrix& P_bar, const Vector& y, const Matrix& R,
                                            const std::vector<Index>& rows, const Matrix* projection) {
  const Matrix Ceff = effective_loading(dict_prev.mean, projection);
  const Vector z = projected(mu_bar, projection);
  const double spread = z.dot(dict_prev.col_cov * z);
  const Matrix Co = Ceff(rows, Eigen::all);
  const Matrix Ro = R(rows, rows);
  const Vector e = y(rows) - Co * mu_bar;

  const InnovationCovariance S(Co, P_bar, Ro, spread);
  const Matrix CoP = Co * P_bar;
  Matrix rhs(Co.rows(), 1 + CoP.cols());
  rhs.col(0) = e;
  rhs.rightCols(CoP.cols()) = CoP;
  const Matrix X = S.solve(rhs);

  CoefficientUpdate out;
  out.posterior.mean = mu_bar + CoP.transpose() * X.col(0);
  out.posterior.cov = symmetrize_spd(P_bar - CoP.transpose() * X.rightCols(CoP.cols()));
  if (!out.posterior.mean.allFinite())
    throw NumericalError(ErrorKind::numerical_divergence, "coefficient mean became non-finite");
  out.mahalanobis = e.dot(X.col(0));
  out.residual = e;
  return out;
}

}  // namespace detail

/// Kalman update of the coefficients under N(y; C x, R + (z'Vz) I). With a mask, only observed rows
/// of C, y and R enter. `projection` is the GP observation map H (C is replaced by C H).
inline CoefficientPosterior update_coefficients(const DictionaryPosterior& dict_prev, const Vector& mu_bar,
                                                const Matrix& P_bar, const Vector& y, const Matrix& R,
                                                const std::optional<MaskVector>& mask = std::nullopt,
                                                const Matrix* projection = nullptr) {
  const auto rows = observed_rows(dict_prev.mean.rows(), mask);
  if (rows.empty()) return CoefficientPosterior{mu_bar, P_bar};
  return detail::coefficient_update(dict_prev, mu_bar, P_bar, y, R, rows, projection).posterior;
}

struct StepResult {
  FilterState state;
  FilterTraceEntry trace;
};

struct Imputation {
  Vector mean;
  Vector var;
};

namespace detail {

/// Shared pieces of one step: prediction and its image in observation space.
struct StepPieces {
  Prediction pred;
  std::vector<Index> rows;
  Matrix Ceff;
  Vector z;
  double spread = 0.0;
  Vector yhat;
  Vector yvar;
};

inline StepPieces step_pieces(const FilterState& state, const SubspaceModel& model, const Vector& y,
                              const std::optional<MaskVector>& mask) {
  require(y.size() == state.dims(), "observation dimension mismatch");
  StepPieces p;
  p.pred = predict(state, model);
  p.rows = observed_rows(state.dims(), mask);
  p.Ceff = effective_loading(state.dict.mean, model.projection());
  p.z = projected(p.pred.mu_bar, model.projection());
  p.spread = p.z.dot(state.dict.col_cov * p.z);
  p.yhat = p.Ceff * p.pred.mu_bar;
  const Matrix CP = p.Ceff * p.pred.P_bar;
  p.yvar = (CP.array() * p.Ceff.array()).rowwise().sum().matrix() + state.noise.R.diagonal();
  p.yvar.array() += p.spread;
  for (Index i : p.rows)
    if (!std::isfinite(y(i))) throw ContractError("observed entry " + std::to_string(i) + " is not finite");
  return p;
}

inline NllMode gaussian_mode(const std::optional<MaskVector>& mask) {
  return mask ? NllMode::masked : NllMode::gaussian;
}

}  // namespace detail

/// One PSMF step: predict, then update dictionary and coefficients from the same prediction.
inline StepResult filter_step(const FilterState& state, const SubspaceModel& model, const Vector& y,
                              const std::optional<MaskVector>& mask = std::nullopt) {
  detail::StepPieces p = detail::step_pieces(state, model, y, mask);
  const Matrix* H = model.projection();

  StepResult out{state, FilterTraceEntry{}};
  FilterTraceEntry& tr = out.trace;
  tr.k = state.k + 1;
  tr.observed_count = static_cast<Index>(p.rows.size());
  tr.predictive_mean = p.yhat;
  tr.predictive_var = p.yvar;
  out.state.k = state.k + 1;

  if (p.rows.empty()) {
    tr.eta = compute_eta(p.Ceff, p.pred.P_bar, state.noise.R);
    out.state.coef = CoefficientPosterior{p.pred.mu_bar, p.pred.P_bar};
    return out;
  }

  tr.eta = compute_eta(p.Ceff, p.pred.P_bar, state.noise.R, mask);
  out.state.dict = update_dictionary(state.dict, p.z, y, tr.eta, mask);
  auto cu = detail::coefficient_update(state.dict, p.pred.mu_bar, p.pred.P_bar, y, state.noise.R, p.rows, H);
  out.state.coef = std::move(cu.posterior);
  tr.innovation_norm = cu.residual.norm();
  tr.nll_increment = detail::marginal_nll(p.z, state.dict.mean, state.dict.col_cov, y, tr.eta,
                                          detail::gaussian_mode(mask), p.rows, 0.0);
  return out;
}

/// Predictive reconstruction C_{k-1} mu_bar_k with variance diag(C Pbar C' + Rbar); observed entries
/// of y pass through unchanged.
inline Imputation reconstruct_and_impute(const FilterState& state, const SubspaceModel& model, const Vector& y,
                                         const std::optional<MaskVector>& mask = std::nullopt) {
  detail::StepPieces p = detail::step_pieces(state, model, y, mask);
  Imputation out{p.yhat, p.yvar};
  for (Index i : p.rows) out.mean(i) = y(i);
  return out;
}

/// Mean forecast: iterate f from the current posterior mean; column h is step k + h + 1.
inline Matrix forecast(const FilterState& state, const SubspaceModel& model, Index horizon) {
  const Matrix Ceff = detail::effective_loading(state.dict.mean, model.projection());
  Matrix out(state.dims(), horizon);
  Vector mu = state.coef.mean;
  for (Index h = 0; h < horizon; ++h) {
    mu = eval_f(model, mu, state.k + 1 + static_cast<long>(h));
    out.col(h) = Ceff * mu;
  }
  return out;
}

}  // namespace psmf
