#pragma once

#include "psmf/filter.hpp"
#include "psmf/likelihood.hpp"
#include "psmf/robust.hpp"

#include <chrono>
#include <string>
#include <vector>

namespace psmf {

enum class FitMode { iterative, recursive };

struct OptimizerConfig {
  double gamma = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  FitMode mode = FitMode::iterative;
  int outer_iterations = 1;
  bool reinit_noise_each_outer = false;

  void validate() const {
    require(gamma >= 0.0, "learning rate must be non-negative");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
    require(epsilon > 0.0, "Adam epsilon must be positive");
    require(outer_iterations >= 1, "outer_iterations must be positive");
  }
};

struct AdamState {
  Vector m;
  Vector v;
  long iteration = 0;

  static AdamState zeros(Index n) { return AdamState{Vector::Zero(n), Vector::Zero(n), 0}; }
};

/// Projected Adam ascent step: theta' = max(lower, theta + gamma * m_hat / (sqrt(v_hat) + eps)).
inline Vector adam_step(AdamState& st, const OptimizerConfig& cfg, const Vector& theta, const Vector& ascent,
                        const Vector& lower) {
  require(ascent.size() == theta.size() && lower.size() == theta.size(), "Adam: dimension mismatch");
  if (st.m.size() != theta.size()) st = AdamState::zeros(theta.size());
  st.iteration += 1;
  st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * ascent;
  st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * ascent.cwiseProduct(ascent);
  const double i = static_cast<double>(st.iteration);
  const Vector m_hat = st.m / (1.0 - std::pow(cfg.beta1, i));
  const Vector v_hat = st.v / (1.0 - std::pow(cfg.beta2, i));
  Vector next = theta + cfg.gamma * (m_hat.array() / (v_hat.array().sqrt() + cfg.epsilon)).matrix();
  return next.cwiseMax(lower);
}

// ---------------------------------------------------------------------------
// Per-step likelihood and gradients
// ---------------------------------------------------------------------------

/// Everything the one-step likelihood needs besides theta. eta and the previous posterior are held
/// fixed when differentiating.
struct NllContext {
  Vector mu_prev;
  DictionaryPosterior dict_prev;
  Vector y;
  double eta = 0.0;
  long k = 1;  // time index of the predicted step
  std::optional<MaskVector> mask;
  double lambda_prev = 0.0;
};

inline NllContext make_nll_context(const FilterState& prev, const Vector& y, const std::optional<MaskVector>& mask,
                                   double eta, double lambda_prev = 0.0) {
  return NllContext{prev.coef.mean, prev.dict, y, eta, prev.k + 1, mask, lambda_prev};
}

inline double nll_step(const SubspaceModel& model, const Vector& theta, const NllContext& ctx, NllMode mode) {
  const Vector f = detail::eval_with_theta(model, theta, ctx.mu_prev, ctx.k);
  const Vector z = detail::projected(f, model.projection());
  const auto rows = observed_rows(ctx.y.size(), mode == NllMode::gaussian ? std::nullopt : ctx.mask);
  return detail::marginal_nll(z, ctx.dict_prev.mean, ctx.dict_prev.col_cov, ctx.y, ctx.eta, mode, rows,
                              ctx.lambda_prev);
}

/// Analytic gradient: (df/dtheta)' H' dNLL/dz.
inline Vector nll_gradient(const SubspaceModel& model, const Vector& theta, const NllContext& ctx, NllMode mode) {
  if (theta.size() == 0) return Vector::Zero(0);
  const Vector f = detail::eval_with_theta(model, theta, ctx.mu_prev, ctx.k);
  const Vector z = detail::projected(f, model.projection());
  const auto rows = observed_rows(ctx.y.size(), mode == NllMode::gaussian ? std::nullopt : ctx.mask);
  Vector grad_z;
  detail::marginal_nll(z, ctx.dict_prev.mean, ctx.dict_prev.col_cov, ctx.y, ctx.eta, mode, rows, ctx.lambda_prev,
                       &grad_z);
  Vector grad_f = model.projection() ? Vector(model.projection()->transpose() * grad_z) : grad_z;
  return theta_jacobian(model, theta, ctx.mu_prev, ctx.k).transpose() * grad_f;
}

/// Reference central-difference gradient, h_i = max(1e-7, 1e-7 |theta_i|); one-sided next to the
/// projection floor.
inline Vector nll_gradient_fd(const SubspaceModel& model, const Vector& theta, const NllContext& ctx, NllMode mode,
                              double base_step = 1e-7) {
  Vector g(theta.size());
  const Vector& lower = model.lower_bounds();
  for (Index i = 0; i < theta.size(); ++i) {
    const double h = std::max(base_step, base_step * std::abs(theta(i)));
    Vector tp = theta, tm = theta;
    tp(i) += h;
    if (theta(i) - h < lower(i)) {
      g(i) = (nll_step(model, tp, ctx, mode) - nll_step(model, theta, ctx, mode)) / (tp(i) - theta(i));
    } else {
      tm(i) -= h;
      g(i) = (nll_step(model, tp, ctx, mode) - nll_step(model, tm, ctx, mode)) / (tp(i) - tm(i));
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Fitting loops
// ---------------------------------------------------------------------------

struct FitOptions {
  OptimizerConfig optimizer;
  std::optional<double> lambda0;  // set for the robust variant
  bool record_trace = true;
};

struct FitIterationReport {
  int iteration = 0;
  double total_nll = 0.0;
  double frobenius_error = 0.0;
  Vector theta;  // parameters used during this pass
};

struct FitReport {
  std::vector<FitIterationReport> iterations;
  bool diverged = false;
  std::string error;
};

struct FitResult {
  SubspaceModel model;
  RobustState state;               // base holds the PSMF state; lambda unused without lambda0
  std::optional<RobustState> first_pass_state;
  FitReport report;
  std::vector<FilterTraceEntry> trace;  // last pass
  Matrix features;                      // r x n filtered means mapped through H, last pass
  double filter_seconds = 0.0;
};

namespace detail {

inline std::optional<MaskVector> column_mask(const DataMatrix& data, Index j) {
  if (data.mask.col(j).all()) return std::nullopt;
  return MaskVector(data.mask.col(j));
}

inline NllMode likelihood_mode(bool robust, const std::optional<MaskVector>& mask) {
  if (robust) return NllMode::robust;
  return mask ? NllMode::masked : NllMode::gaussian;
}

struct StepOutcome {
  FilterTraceEntry trace;
  NllContext context;
};

/// Advance either variant by one step, returning the likelihood context at the pre-step posterior.
inline StepOutcome advance(RobustState& state, bool robust, const SubspaceModel& model, const Vector& y,
                           const std::optional<MaskVector>& mask) {
  const FilterState prev = state.base;
  const double lambda_prev = state.lambda;
  FilterTraceEntry trace;
  if (robust) {
    auto r = robust_filter_step(state, model, y, mask);
    state = std::move(r.state);
    trace = std::move(r.trace);
  } else {
    auto r = filter_step(state.base, model, y, mask);
    state.base = std::move(r.state);
    trace = std::move(r.trace);
  }
  if (!std::isfinite(trace.nll_increment) || !state.base.coef.cov.allFinite() || !state.base.dict.col_cov.allFinite())
    throw NumericalError(ErrorKind::numerical_divergence, "filter diverged at step " + std::to_string(trace.k));
  NllContext ctx = make_nll_context(prev, y, mask, trace.eta, lambda_prev);
  return StepOutcome{std::move(trace), std::move(ctx)};
}

inline double masked_frobenius(const DataMatrix& data, const Matrix& C, const Matrix& features) {
  const Matrix resid = data.values - C * features;
  double acc = 0.0;
  for (Index j = 0; j < resid.cols(); ++j)
    for (Index i = 0; i < resid.rows(); ++i)
      if (data.mask(i, j)) acc += resid(i, j) * resid(i, j);
  return std::sqrt(acc);
}

}  // namespace detail

/// Multiple filtering passes with one projected-Adam step on theta per pass. Each pass warm-starts
/// from the previous final posterior; optionally V0, Q and R are reset to their initial values.
inline FitResult iterative_fit(const DataMatrix& data, const SubspaceModel& model0, const NoiseConfig& noise,
                               const FitOptions& opts) {
  data.validate();
  opts.optimizer.validate();
  const bool robust = opts.lambda0.has_value();
  const double lambda0 = robust ? *opts.lambda0 : 1.0;

  SubspaceModel model = model0;
  FitResult result{model, RobustState::initial(noise, model, lambda0), std::nullopt, {}, {}, {}, 0.0};
  AdamState adam = AdamState::zeros(model.theta().size());
  const Index n = data.steps();
  const Index r = model.feature_dim();

  RobustState state = result.state;
  for (int it = 1; it <= opts.optimizer.outer_iterations; ++it) {
    if (it > 1) {
      const RobustState& last = result.state;
      NoiseConfig warm = last.base.noise;
      warm.C0 = last.base.dict.mean;
      warm.V0 = opts.optimizer.reinit_noise_each_outer ? noise.V0 : last.base.dict.col_cov;
      warm.mu0 = last.base.coef.mean;
      warm.P0 = last.base.coef.cov;
      if (opts.optimizer.reinit_noise_each_outer) {
        warm.Q = noise.Q;
        warm.R = noise.R;
      }
      state = RobustState::initial(warm, model, lambda0);
    }

    Vector ascent = Vector::Zero(model.theta().size());
    double total_nll = 0.0;
    Matrix features(r, n);
    std::vector<FilterTraceEntry> trace;
    if (opts.record_trace) trace.reserve(static_cast<std::size_t>(n));

    try {
      const auto t0 = std::chrono::steady_clock::now();
      for (Index j = 0; j < n; ++j) {
        const auto mask = detail::column_mask(data, j);
        auto out = detail::advance(state, robust, model, data.values.col(j), mask);
        total_nll += out.trace.nll_increment;
        if (ascent.size() > 0 && out.trace.observed_count > 0)
          ascent -= nll_gradient(model, model.theta(), out.context, detail::likelihood_mode(robust, mask));
        features.col(j) = detail::projected(state.base.coef.mean, model.projection());
        if (opts.record_trace) trace.push_back(std::move(out.trace));
      }
      result.filter_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (!std::isfinite(total_nll) || !ascent.allFinite())
        throw NumericalError(ErrorKind::numerical_divergence, "non-finite total likelihood");
    } catch (const NumericalError& err) {
      result.report.diverged = true;
      result.report.error = err.what();
      return result;
    }

    result.report.iterations.push_back(FitIterationReport{
        it, total_nll, detail::masked_frobenius(data, state.base.dict.mean, features), model.theta()});
    result.state = state;
    if (it == 1) result.first_pass_state = state;
    result.trace = std::move(trace);
    result.features = std::move(features);

    if (ascent.size() > 0) model = model.with_theta(adam_step(adam, opts.optimizer, model.theta(), ascent, model.lower_bounds()));
    result.model = model;
  }
  return result;
}

/// Streaming estimator: theta is updated after every filter step from that step's gradient.
/// Memory use is independent of the stream length.
class RecursiveFitter {
 public:
  RecursiveFitter(const SubspaceModel& model, const NoiseConfig& noise, const OptimizerConfig& cfg,
                  std::optional<double> lambda0 = std::nullopt)
      : model_(model),
        cfg_(cfg),
        robust_(lambda0.has_value()),
        state_(RobustState::initial(noise, model, lambda0.value_or(1.0))),
        adam_(AdamState::zeros(model.theta().size())) {
    cfg.validate();
  }

  FilterTraceEntry step(const Vector& y, const std::optional<MaskVector>& mask = std::nullopt) {
    auto out = detail::advance(state_, robust_, model_, y, mask);
    total_nll_ += out.trace.nll_increment;
    if (model_.theta().size() > 0 && out.trace.observed_count > 0) {
      const Vector ascent = -nll_gradient(model_, model_.theta(), out.context, detail::likelihood_mode(robust_, mask));
      if (!ascent.allFinite()) throw NumericalError(ErrorKind::numerical_divergence, "non-finite gradient");
      model_ = model_.with_theta(adam_step(adam_, cfg_, model_.theta(), ascent, model_.lower_bounds()));
    }
    return std::move(out.trace);
  }

  const SubspaceModel& model() const { return model_; }
  const RobustState& state() const { return state_; }
  double total_nll() const { return total_nll_; }

 private:
  SubspaceModel model_;
  OptimizerConfig cfg_;
  bool robust_;
  RobustState state_;
  AdamState adam_;
  double total_nll_ = 0.0;
};

/// One streaming pass over `data` with per-step parameter updates.
inline FitResult recursive_fit(const DataMatrix& data, const SubspaceModel& model0, const NoiseConfig& noise,
                               const FitOptions& opts) {
  data.validate();
  RecursiveFitter fitter(model0, noise, opts.optimizer, opts.lambda0);
  FitResult result{model0, fitter.state(), std::nullopt, {}, {}, {}, 0.0};
  const Index n = data.steps();
  Matrix features(model0.feature_dim(), n);
  try {
    const auto t0 = std::chrono::steady_clock::now();
    for (Index j = 0; j < n; ++j) {
      auto tr = fitter.step(data.values.col(j), detail::column_mask(data, j));
      features.col(j) = detail::projected(fitter.state().base.coef.mean, fitter.model().projection());
      if (opts.record_trace) result.trace.push_back(std::move(tr));
    }
    result.filter_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  } catch (const NumericalError& err) {
    result.report.diverged = true;
    result.report.error = err.what();
  }
  result.model = fitter.model();
  result.state = fitter.state();
  result.features = std::move(features);
  if (!result.report.diverged)
    result.report.iterations.push_back(FitIterationReport{
        1, fitter.total_nll(), detail::masked_frobenius(data, fitter.state().base.dict.mean, result.features),
        fitter.model().theta()});
  return result;
}

inline FitResult fit(const DataMatrix& data, const SubspaceModel& model, const NoiseConfig& noise,
                     const FitOptions& opts) {
  return opts.optimizer.mode == FitMode::iterative ? iterative_fit(data, model, noise, opts)
                                                   : recursive_fit(data, model, noise, opts);
}

}  // namespace psmf
