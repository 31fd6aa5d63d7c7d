#pragma once

#include "psmf/filter.hpp"
#include "psmf/subspace.hpp"

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace psmf {

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// Counter-based generator: draw i of stream s under seed is a pure function of (seed, s, i), so
/// independent streams never perturb each other.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  CounterRng(std::uint64_t seed, std::uint64_t stream) : key_(mix(mix(seed) ^ (stream * 0xD1B54A32D192ED03ULL))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

  std::uint64_t counter() const { return counter_; }

 private:
  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

enum class RngStream : std::uint64_t {
  dictionary = 1,
  initial_state = 2,
  process = 3,
  observation = 4,
  mask = 5,
  theta_init = 6,
  filter_init = 7,
};

inline CounterRng make_rng(std::uint64_t seed, RngStream stream) {
  return CounterRng(seed, static_cast<std::uint64_t>(stream));
}

inline Matrix standard_normal(CounterRng& rng, Index rows, Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out(i, j) = normal(rng);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

enum class NoiseKind { gaussian, student_t };

struct SyntheticSpec {
  Index d = 20;
  Index r = 6;  // dictionary columns
  Index n = 500;
  Index n_forecast = 0;
  SubspaceModel model = SubspaceModel::random_walk(6);  // carries theta_true
  NoiseKind noise = NoiseKind::gaussian;
  double dof = 3.0;
  double noise_scale = 0.1;
  double process_noise = 0.0;  // Q = q I
  Vector mu0;                  // defaults to zeros
  double p0 = 0.0;             // P0 = p0 I
  std::uint64_t seed = 0;

  void validate() const {
    require(d >= 1 && r >= 1 && n >= 1 && n_forecast >= 0, "synthetic dimensions must be positive");
    require(model.feature_dim() == r, "synthetic model feature dimension must equal r");
    require(noise != NoiseKind::student_t || dof > 0.0, "student-t noise needs positive degrees of freedom");
    require(noise_scale >= 0.0 && process_noise >= 0.0 && p0 >= 0.0, "noise scales must be non-negative");
    require(mu0.size() == 0 || mu0.size() == model.state_dim(), "mu0 must match the model state dimension");
  }
};

struct SyntheticData {
  DataMatrix train;  // d x n
  Matrix test;       // d x n_forecast
  Matrix C_true;     // d x r
  Matrix X_true;     // state_dim x (n + n_forecast), column j is x_{j+1}
  Vector x0;
};

/// Simulate x_k = f(x_{k-1}, k) + sqrt(q) w_k, y_k = C H x_k + scale * eps_k. Student-t noise shares
/// one chi-square scale draw across the dimensions of a time step.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  auto dict_rng = make_rng(spec.seed, RngStream::dictionary);
  auto init_rng = make_rng(spec.seed, RngStream::initial_state);
  auto proc_rng = make_rng(spec.seed, RngStream::process);
  auto obs_rng = make_rng(spec.seed, RngStream::observation);

  const Index s = spec.model.state_dim();
  const Index total = spec.n + spec.n_forecast;
  SyntheticData out;
  out.C_true = standard_normal(dict_rng, spec.d, spec.r);
  const Vector mu0 = spec.mu0.size() ? spec.mu0 : Vector::Zero(s);
  out.x0 = mu0 + std::sqrt(spec.p0) * standard_normal(init_rng, s, 1).col(0);

  const Matrix Ceff = detail::effective_loading(out.C_true, spec.model.projection());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::chi_squared_distribution<double> chi2(spec.noise == NoiseKind::student_t ? spec.dof : 1.0);

  out.X_true.resize(s, total);
  Matrix Y(spec.d, total);
  Vector x = out.x0;
  for (Index j = 0; j < total; ++j) {
    x = eval_f(spec.model, x, static_cast<long>(j + 1));
    if (spec.process_noise > 0.0) x += std::sqrt(spec.process_noise) * standard_normal(proc_rng, s, 1).col(0);
    out.X_true.col(j) = x;
    Vector eps = standard_normal(obs_rng, spec.d, 1).col(0);
    if (spec.noise == NoiseKind::student_t) eps /= std::sqrt(chi2(obs_rng) / spec.dof);
    Y.col(j) = Ceff * x + spec.noise_scale * eps;
  }
  out.train = DataMatrix::fully_observed(Y.leftCols(spec.n));
  out.test = Y.rightCols(spec.n_forecast);
  return out;
}

/// Periodic benchmark: d = 20, r = 6, cosine subspace with theta* = 1e-3 [1..6], 500 observed and
/// 250 future steps, x_0 = mu_0 = 0, no process noise.
inline SyntheticSpec periodic_benchmark_spec(std::uint64_t seed, NoiseKind noise = NoiseKind::gaussian,
                                             double noise_scale = 0.1) {
  SyntheticSpec spec;
  spec.d = 20;
  spec.r = 6;
  spec.n = 500;
  spec.n_forecast = 250;
  Vector theta(6);
  theta << 1, 2, 3, 4, 5, 6;
  spec.model = SubspaceModel::cosine_periodic(1e-3 * theta);
  spec.noise = noise;
  spec.dof = 3.0;
  spec.noise_scale = noise_scale;
  spec.seed = seed;
  return spec;
}

// ---------------------------------------------------------------------------
// Missing-data masks and metrics
// ---------------------------------------------------------------------------

/// Remove runs of `segment_len` entries at uniformly random (dimension, start) positions until the
/// missing fraction reaches `target_fraction`. Runs may overlap and are truncated at the series end.
/// Returns true for entries that remain observed.
inline MaskMatrix generate_segment_mask(Index d, Index n, Index segment_len, double target_fraction,
                                        std::uint64_t seed) {
  require(d >= 1 && n >= 1, "mask dimensions must be positive");
  require(segment_len >= 1 && segment_len <= n, "segment length must lie in [1, n]");
  require(target_fraction > 0.0 && target_fraction < 1.0, "target missing fraction must lie in (0, 1)");
  auto rng = make_rng(seed, RngStream::mask);
  std::uniform_int_distribution<Index> pick_dim(0, d - 1);
  std::uniform_int_distribution<Index> pick_start(0, n - 1);

  MaskMatrix mask = MaskMatrix::Constant(d, n, true);
  const double total = static_cast<double>(d * n);
  Index missing = 0;
  while (static_cast<double>(missing) / total < target_fraction) {
    const Index i = pick_dim(rng);
    const Index start = pick_start(rng);
    const Index stop = std::min(n, start + segment_len);
    for (Index j = start; j < stop; ++j) {
      if (mask(i, j)) {
        mask(i, j) = false;
        ++missing;
      }
    }
  }
  return mask;
}

struct ImputationMetrics {
  double rmse = 0.0;
  double coverage2sigma = 0.0;
  Index count = 0;
};

/// RMSE and 2-sigma coverage over held-out entries (holdout == true).
inline ImputationMetrics imputation_metrics(const Matrix& Y_true, const Matrix& Y_hat, const Matrix& Y_var,
                                            const MaskMatrix& holdout) {
  require(Y_true.rows() == Y_hat.rows() && Y_true.cols() == Y_hat.cols() && Y_var.rows() == Y_true.rows() &&
              Y_var.cols() == Y_true.cols() && holdout.rows() == Y_true.rows() && holdout.cols() == Y_true.cols(),
          "imputation metrics: shape mismatch");
  ImputationMetrics m;
  double sq = 0.0;
  Index covered = 0;
  for (Index j = 0; j < Y_true.cols(); ++j)
    for (Index i = 0; i < Y_true.rows(); ++i) {
      if (!holdout(i, j)) continue;
      const double err = Y_true(i, j) - Y_hat(i, j);
      sq += err * err;
      if (std::abs(err) <= 2.0 * std::sqrt(Y_var(i, j))) ++covered;
      ++m.count;
    }
  require(m.count > 0, "imputation metrics: empty holdout set");
  m.rmse = std::sqrt(sq / static_cast<double>(m.count));
  m.coverage2sigma = static_cast<double>(covered) / static_cast<double>(m.count);
  return m;
}

/// Baseline: every unobserved entry gets its dimension's observed mean (0 if none observed).
inline Matrix column_mean_impute(const DataMatrix& data) {
  Matrix out = data.values;
  for (Index i = 0; i < data.dims(); ++i) {
    double sum = 0.0;
    Index count = 0;
    for (Index j = 0; j < data.steps(); ++j)
      if (data.mask(i, j)) {
        sum += data.values(i, j);
        ++count;
      }
    const double mean = count ? sum / static_cast<double>(count) : 0.0;
    for (Index j = 0; j < data.steps(); ++j)
      if (!data.mask(i, j)) out(i, j) = mean;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

inline Matrix kron(const Matrix& A, const Matrix& B) {
  Matrix out(A.rows() * B.rows(), A.cols() * B.cols());
  for (Index j = 0; j < A.cols(); ++j)
    for (Index i = 0; i < A.rows(); ++i) out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return out;
}

struct GaussianPosterior {
  Vector mean;
  Matrix cov;
};

/// Textbook joint-Gaussian conditioning of c ~ N(c_prev, L_prev) on y ~ N(H c, G). Dense O(n^3).
inline GaussianPosterior vectorized_kalman_oracle(const Vector& c_prev, const Matrix& L_prev, const Matrix& H,
                                                  const Matrix& G, const Vector& y) {
  const Matrix S = H * L_prev * H.transpose() + G;
  Eigen::FullPivLU<Matrix> lu(S);
  if (!lu.isInvertible()) throw NumericalError(ErrorKind::numerical_singularity, "oracle innovation is singular");
  const Matrix K = L_prev * H.transpose() * lu.inverse();
  GaussianPosterior out;
  out.mean = c_prev + K * (y - H * c_prev);
  out.cov = L_prev - K * H * L_prev;
  return out;
}

using GaussianMoments = GaussianPosterior;

/// Symmetric PSD square root via eigendecomposition; eigenvalues below zero (roundoff) are clamped.
inline Matrix psd_sqrt(const Matrix& M) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (M + M.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError(ErrorKind::numerical_divergence, "eigendecomposition failed");
  const double tol = 1e-8 * std::max(1.0, std::abs(M.trace()));
  if (es.eigenvalues().size() && es.eigenvalues().minCoeff() < -tol)
    throw NumericalError(ErrorKind::numerical_divergence, "matrix square root of an indefinite matrix");
  const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

/// W2(N(m1, S1), N(m2, S2)) = sqrt(|m1 - m2|^2 + Tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2)).
inline double wasserstein2_gaussian(const GaussianMoments& a, const GaussianMoments& b) {
  require(a.mean.size() == b.mean.size() && a.cov.rows() == b.cov.rows(), "W2: dimension mismatch");
  const Matrix root_b = psd_sqrt(b.cov);
  const Matrix cross = psd_sqrt(root_b * a.cov * root_b);
  const double w2sq = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
  return std::sqrt(std::max(0.0, w2sq));
}

// ---------------------------------------------------------------------------
// Convergence diagnostic
// ---------------------------------------------------------------------------

struct ConvergenceSetup {
  Index d = 4;
  Index n = 1000;
  double q = 0.01;          // random-walk increment variance
  double obs_noise = 0.1;   // R = obs_noise * I
  double mu0 = 5.0;  // |mu0| >> sqrt(p0) pins the scale of C, which is otherwise only weakly identified
  double p0 = 0.1;
  double v0 = 1.0;
  int passes = 5;            // filtering passes over the path; W2 is measured on the last one
  std::optional<Matrix> C0;  // defaults to an independent N(0, 1) draw
  std::optional<Matrix> C_star;
};

struct ConvergenceResult {
  std::vector<double> w2;      // per-step distance, last pass
  std::vector<double> w2_avg;  // running average, last pass
  Matrix C_star;
  Matrix C0;
  Matrix C_final;
  double initial_error = 0.0;
  double final_error = 0.0;
};

/// Simulates a scalar random walk observed through C* in d dimensions, then runs iterative PSMF
/// (r = 1) over the path. The dictionary posterior carries over between passes while the coefficient
/// prior restarts at (mu0, P0), so the last pass is directly comparable with the Kalman filter that
/// knows C*. Reports the Wasserstein-2 distance between the two filters along that pass.
inline ConvergenceResult convergence_experiment(std::uint64_t seed, const ConvergenceSetup& setup = {}) {
  require(setup.d >= 1 && setup.n >= 1 && setup.passes >= 1, "convergence setup: sizes must be positive");
  auto dict_rng = make_rng(seed, RngStream::dictionary);
  auto init_rng = make_rng(seed, RngStream::initial_state);
  auto proc_rng = make_rng(seed, RngStream::process);
  auto obs_rng = make_rng(seed, RngStream::observation);
  auto filt_rng = make_rng(seed, RngStream::filter_init);

  const Index d = setup.d;
  ConvergenceResult out;
  out.C_star = setup.C_star ? *setup.C_star : standard_normal(dict_rng, d, 1);
  out.C0 = setup.C0 ? *setup.C0 : standard_normal(filt_rng, d, 1);
  const Vector& c = out.C_star.col(0);

  Matrix Y(d, setup.n);
  double x = setup.mu0 + std::sqrt(setup.p0) * standard_normal(init_rng, 1, 1)(0, 0);
  for (Index k = 0; k < setup.n; ++k) {
    x += std::sqrt(setup.q) * standard_normal(proc_rng, 1, 1)(0, 0);
    Y.col(k) = c * x + std::sqrt(setup.obs_noise) * standard_normal(obs_rng, d, 1).col(0);
  }

  const SubspaceModel model = SubspaceModel::random_walk(1);
  NoiseConfig noise;
  noise.Q = Matrix::Constant(1, 1, setup.q);
  noise.R = setup.obs_noise * Matrix::Identity(d, d);
  noise.P0 = Matrix::Constant(1, 1, setup.p0);
  noise.V0 = Matrix::Constant(1, 1, setup.v0);
  noise.mu0 = Vector::Constant(1, setup.mu0);
  noise.C0 = out.C0;

  FilterState psmf_state = FilterState::initial(noise, model);
  for (int pass = 1; pass <= setup.passes; ++pass) {
    if (pass > 1) {
      NoiseConfig warm = noise;
      warm.C0 = psmf_state.dict.mean;
      warm.V0 = psmf_state.dict.col_cov;
      psmf_state = FilterState::initial(warm, model);
    }
    const bool last = pass == setup.passes;
    double kf_mean = setup.mu0;
    double kf_var = setup.p0;
    double running = 0.0;
    for (Index k = 0; k < setup.n; ++k) {
      const Vector y = Y.col(k);
      psmf_state = filter_step(psmf_state, model, y).state;
      if (!last) continue;

      const double pbar = kf_var + setup.q;
      const Matrix S = pbar * c * c.transpose() + noise.R;
      const Eigen::LDLT<Matrix> ldlt(S);
      const Vector gain = pbar * ldlt.solve(c);
      kf_mean += gain.dot(y - c * kf_mean);
      kf_var = pbar - pbar * gain.dot(c);

      const double dist =
          wasserstein2_gaussian(GaussianMoments{psmf_state.coef.mean, psmf_state.coef.cov},
                                GaussianMoments{Vector::Constant(1, kf_mean), Matrix::Constant(1, 1, kf_var)});
      out.w2.push_back(dist);
      running += dist;
      out.w2_avg.push_back(running / static_cast<double>(k + 1));
    }
  }
  out.C_final = psmf_state.dict.mean;
  out.initial_error = (out.C0 - out.C_star).norm();
  out.final_error = (out.C_final - out.C_star).norm();
  return out;
}

}  // namespace psmf
