#pragma once

#include "psmf/config.hpp"
#include "psmf/estimation.hpp"
#include "psmf/evaluation.hpp"
#include "psmf/io.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>

namespace psmf {

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_config = 2 };

// ---------------------------------------------------------------------------
// Materializing config sections
// ---------------------------------------------------------------------------

inline SubspaceModel build_model(const ModelSpec& spec, std::uint64_t seed) {
  Vector theta;
  if (spec.theta) {
    theta = *spec.theta;
  } else if (spec.theta_init) {
    const Index p = spec.kind == ModelKind::sin_cos_periodic ? 6 : spec.dim;
    auto rng = make_rng(seed, RngStream::theta_init);
    std::uniform_real_distribution<double> unif(spec.theta_init->low, spec.theta_init->high);
    theta.resize(p);
    for (Index i = 0; i < p; ++i) theta(i) = unif(rng);
  }
  switch (spec.kind) {
    case ModelKind::random_walk: return SubspaceModel::random_walk(spec.dim);
    case ModelKind::linear: return SubspaceModel::linear(*spec.A);
    case ModelKind::cosine_periodic: return SubspaceModel::cosine_periodic(theta);
    case ModelKind::sin_cos_periodic: return SubspaceModel::sin_cos_periodic(theta, spec.dim);
    case ModelKind::gp_matern32: return SubspaceModel::gp_matern32(spec.gp);
    case ModelKind::custom: break;
  }
  throw ConfigError("model.kind", "custom models cannot be configured from JSON");
}

inline NoiseConfig build_noise(const NoiseSpec& spec, const SubspaceModel& model, Index d, std::uint64_t seed) {
  const Index s = model.state_dim();
  const Index r = model.feature_dim();
  NoiseConfig n;
  if (spec.Q) n.Q = *spec.Q;
  else if (model.process_noise() && spec.q == 0.0) n.Q = *model.process_noise();
  else n.Q = spec.q * Matrix::Identity(s, s);
  if (n.Q.rows() != s || n.Q.cols() != s) throw ConfigError("noise.Q", "must be " + std::to_string(s) + " x " + std::to_string(s));
  n.R = spec.R ? *spec.R : Matrix(spec.r * Matrix::Identity(d, d));
  if (n.R.rows() != d || n.R.cols() != d) throw ConfigError("noise.R", "must be " + std::to_string(d) + " x " + std::to_string(d));
  if (!is_symmetric(n.Q) || !is_psd(n.Q)) throw ConfigError("noise.Q", "must be symmetric positive semidefinite");
  if (!is_symmetric(n.R) || !is_psd(n.R)) throw ConfigError("noise.R", "must be symmetric positive semidefinite");
  n.P0 = spec.p0 * Matrix::Identity(s, s);
  n.V0 = spec.v0 * Matrix::Identity(r, r);
  n.mu0 = spec.mu0 ? *spec.mu0 : Vector(Vector::Constant(s, spec.mu0_value));
  if (n.mu0.size() != s) throw ConfigError("noise.mu0", "must have " + std::to_string(s) + " entries");
  if (spec.C0) {
    n.C0 = *spec.C0;
    if (n.C0.rows() != d || n.C0.cols() != r)
      throw ConfigError("noise.C0", "must be " + std::to_string(d) + " x " + std::to_string(r));
  } else {
    auto rng = make_rng(seed, RngStream::filter_init);
    n.C0 = spec.c0_scale * standard_normal(rng, d, r);
  }
  return n;
}

inline SyntheticSpec build_synthetic_spec(const SyntheticConfig& cfg, std::uint64_t seed) {
  SyntheticSpec s;
  s.model = build_model(cfg.model, seed);
  s.d = cfg.d;
  s.r = s.model.feature_dim();
  s.n = cfg.n;
  s.n_forecast = cfg.n_forecast;
  s.noise = cfg.noise;
  s.dof = cfg.dof;
  s.noise_scale = cfg.noise_scale;
  s.process_noise = cfg.process_noise;
  s.mu0 = Vector::Constant(s.model.state_dim(), cfg.mu0);
  s.p0 = cfg.p0;
  s.seed = seed;
  return s;
}

/// Training data with the ground truth needed for held-out metrics.
struct PreparedData {
  DataMatrix train;            // what the filter sees
  Matrix truth;                // complete training values (NaN where never observed)
  MaskMatrix holdout;          // entries hidden by the missing-data protocol
  std::optional<Matrix> test;  // future values, synthetic runs only
};

inline PreparedData prepare_data(const RunConfig& cfg) {
  PreparedData out;
  if (cfg.synthetic) {
    auto syn = generate_synthetic(build_synthetic_spec(*cfg.synthetic, cfg.seed));
    out.train = std::move(syn.train);
    if (syn.test.cols() > 0) out.test = std::move(syn.test);
  } else {
    out.train = load_matrix(*cfg.data_path);
  }
  out.truth = out.train.values;
  out.holdout = MaskMatrix::Constant(out.train.dims(), out.train.steps(), false);
  if (cfg.missing) {
    if (cfg.missing->segment_len > out.train.steps())
      throw ConfigError("missing.segment_len", "exceeds the series length");
    const MaskMatrix keep = generate_segment_mask(out.train.dims(), out.train.steps(), cfg.missing->segment_len,
                                                  cfg.missing->target_fraction, cfg.seed);
    out.holdout = out.train.mask.array() && !keep.array();
    out.train.mask = out.train.mask.array() && keep.array();
    for (Index j = 0; j < out.train.steps(); ++j)
      for (Index i = 0; i < out.train.dims(); ++i)
        if (!out.train.mask(i, j)) out.train.values(i, j) = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace detail {

inline json vector_json(const Vector& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

/// Predictive mean and variance of every step of the last pass, d x n.
inline std::pair<Matrix, Matrix> predictive_matrices(const std::vector<FilterTraceEntry>& trace, Index d) {
  Matrix mean(d, static_cast<Index>(trace.size()));
  Matrix var(d, static_cast<Index>(trace.size()));
  for (std::size_t j = 0; j < trace.size(); ++j) {
    mean.col(static_cast<Index>(j)) = trace[j].predictive_mean;
    var.col(static_cast<Index>(j)) = trace[j].predictive_var;
  }
  return {mean, var};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  auto out = open_output(path);
  out << text;
}

inline void write_summary(const std::filesystem::path& dir, const json& summary) {
  write_text(dir / "summary.json", summary.dump(2) + "\n");
}

inline FitResult run_fit(const RunConfig& cfg, const PreparedData& data, const SubspaceModel& model,
                         const NoiseConfig& noise) {
  FitOptions opts;
  opts.optimizer = cfg.optimizer;
  if (cfg.robust) opts.lambda0 = cfg.lambda0;
  FitResult result = fit(data.train, model, noise, opts);
  if (result.report.diverged) throw NumericalError(ErrorKind::numerical_divergence, result.report.error);
  return result;
}

inline void write_fit_artifacts(const std::filesystem::path& dir, const RunConfig& cfg, const FitResult& result,
                                json& summary) {
  {
    auto out = open_output(dir / "trace.csv");
    write_trace(out, result.trace, cfg.robust);
  }
  {
    auto out = open_output(dir / "fit_report.csv");
    write_fit_report(out, result.report);
  }
  write_matrix(dir / "reconstruction.csv", result.state.base.dict.mean * result.features);
  summary["theta"] = vector_json(result.model.theta());
  summary["iterations"] = result.report.iterations.size();
  if (!result.report.iterations.empty()) {
    summary["total_nll"] = result.report.iterations.back().total_nll;
    summary["frobenius_error"] = result.report.iterations.back().frobenius_error;
  }
  summary["runtime_seconds"] = result.filter_seconds;
}

/// RMSE of `estimate` against `truth` over `select` and the 2-sigma coverage given `var`.
inline void add_metrics(json& summary, const Matrix& truth, const Matrix& estimate, const Matrix& var,
                        const MaskMatrix& select) {
  if (select.count() == 0) return;
  const auto m = imputation_metrics(truth, estimate, var, select);
  summary["rmse"] = m.rmse;
  summary["coverage"] = m.coverage2sigma;
  summary["evaluated_entries"] = m.count;
}

}  // namespace detail

/// Run one configured experiment, writing artifacts and summary.json into cfg.output_dir. Module
/// errors are reported in summary.json and through a nonzero return value.
inline int run_experiment(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path dir = cfg.output_dir;
  json summary;
  summary["command"] = to_string(cfg.command);
  summary["seed"] = cfg.seed;
  try {
    fs::create_directories(dir);
    if (cfg.command == Command::converge) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto res = convergence_experiment(cfg.seed, cfg.convergence);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      auto out = detail::open_output(dir / "wasserstein.csv");
      out << "k,w2,w2_avg\n";
      for (std::size_t k = 0; k < res.w2.size(); ++k)
        out << (k + 1) << ',' << detail::format_double(res.w2[k]) << ',' << detail::format_double(res.w2_avg[k])
            << '\n';
      summary["initial_dictionary_error"] = res.initial_error;
      summary["final_dictionary_error"] = res.final_error;
      summary["w2_avg_final"] = res.w2_avg.empty() ? 0.0 : res.w2_avg.back();
      summary["runtime_seconds"] = secs;
      summary["status"] = "ok";
      detail::write_summary(dir, summary);
      return exit_ok;
    }

    const PreparedData data = prepare_data(cfg);
    if (cfg.command == Command::synth) {
      write_data(dir / "train.csv", data.train);
      if (cfg.missing) write_matrix(dir / "train_complete.csv", data.truth);
      if (data.test) write_matrix(dir / "test.csv", *data.test);
      summary["train_shape"] = {data.train.steps(), data.train.dims()};
      summary["test_shape"] = {data.test ? data.test->cols() : 0, data.train.dims()};
      summary["status"] = "ok";
      detail::write_summary(dir, summary);
      return exit_ok;
    }

    const SubspaceModel model = build_model(cfg.model, cfg.seed);
    const NoiseConfig noise = build_noise(cfg.noise, model, data.train.dims(), cfg.seed);
    const FitResult result = detail::run_fit(cfg, data, model, noise);
    detail::write_fit_artifacts(dir, cfg, result, summary);
    const auto [pred_mean, pred_var] = detail::predictive_matrices(result.trace, data.train.dims());

    switch (cfg.command) {
      case Command::fit:
      case Command::gp_features:
        // one-step-ahead predictive fit on the observed entries
        detail::add_metrics(summary, data.train.values, pred_mean, pred_var, data.train.mask);
        if (cfg.command == Command::gp_features) write_matrix(dir / "features.csv", result.features);
        break;
      case Command::impute: {
        Matrix imputed = data.train.values;
        for (Index j = 0; j < imputed.cols(); ++j)
          for (Index i = 0; i < imputed.rows(); ++i)
            if (!data.train.mask(i, j)) imputed(i, j) = pred_mean(i, j);
        write_matrix(dir / "imputed.csv", imputed);
        detail::add_metrics(summary, data.truth, pred_mean, pred_var, data.holdout);
        break;
      }
      case Command::forecast: {
        const Index h = cfg.horizon ? *cfg.horizon : data.test->cols();
        const Matrix fc = forecast(result.state.base, result.model, h);
        write_matrix(dir / "forecast.csv", fc);
        if (data.test) {
          const Index overlap = std::min(h, data.test->cols());
          summary["rmse"] = std::sqrt(
              (fc.leftCols(overlap) - data.test->leftCols(overlap)).squaredNorm() / static_cast<double>(overlap * fc.rows()));
        }
        break;
      }
      default: break;
    }
    summary["status"] = "ok";
    detail::write_summary(dir, summary);
    return exit_ok;
  } catch (const Error& err) {
    summary["status"] = "error";
    summary["error"] = {{"kind", to_string(err.kind())}, {"message", err.what()}};
    if (const auto* ce = dynamic_cast<const ConfigError*>(&err)) summary["error"]["field"] = ce->field();
    if (const auto* pe = dynamic_cast<const ParseError*>(&err)) summary["error"]["line"] = pe->line();
    summary.erase("runtime_seconds");
    try {
      detail::write_summary(dir, summary);
    } catch (const std::exception&) {
    }
    return err.kind() == ErrorKind::config ? exit_config : exit_failure;
  } catch (const std::exception& err) {
    summary["status"] = "error";
    summary["error"] = {{"kind", "internal"}, {"message", err.what()}};
    try {
      detail::write_summary(dir, summary);
    } catch (const std::exception&) {
    }
    return exit_failure;
  }
}

}  // namespace psmf
