#include "psmf/robust.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

namespace psmf {
namespace {

using test::random_matrix;
using test::random_positive;
using test::random_spd;
using test::random_vector;
using test::rel_err;

NoiseConfig random_noise(test::Rng& rng, Index d, Index r) {
  NoiseConfig n;
  n.Q = 0.1 * random_spd(rng, r);
  n.R = Matrix(random_positive(rng, d, 0.2, 1.0).asDiagonal());
  n.P0 = random_spd(rng, r);
  n.V0 = random_spd(rng, r);
  n.mu0 = random_vector(rng, r);
  n.C0 = random_matrix(rng, d, r);
  return n;
}

TEST(CoefficientScale, ZeroResidual) {
  const Index d = 20;
  const Matrix C = Matrix::Identity(d, 1);
  const Vector mu = Vector::Constant(1, 2.0);
  const double omega = coefficient_scale_factor(C * mu, C, mu, Matrix::Identity(d, d), 1.8);
  EXPECT_DOUBLE_EQ(omega, 1.8 / 21.8);
  EXPECT_NEAR(omega, 0.08257, 1e-5);
}

TEST(CoefficientScale, UnitWhenMahalanobisEqualsDimension) {
  const Index d = 5;
  const Vector y = Vector::Ones(d);  // |e|^2 = d with S = I
  EXPECT_DOUBLE_EQ(coefficient_scale_factor(y, Matrix::Zero(d, 1), Vector::Zero(1), Matrix::Identity(d, d), 3.0), 1.0);
}

// For a joint Gaussian over (x, y), the marginal Mahalanobis distance of y equals the joint distance
// minus the conditional distance of x given y. The multivariate-t conditional scale factor is
// (lambda + that marginal distance) / (lambda + d).
TEST(CoefficientScale, MatchesPartitionedStudentT) {
  test::Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Index d = test::uniform_index(rng, 1, 6);
    const Index r = test::uniform_index(rng, 1, 3);
    const Matrix C = random_matrix(rng, d, r);
    const Matrix P = random_spd(rng, r);
    const Matrix R = random_spd(rng, d);
    const Vector mu = random_vector(rng, r);
    const Vector y = random_vector(rng, d, 2.0);
    const Matrix S = C * P * C.transpose() + R;

    Matrix joint(r + d, r + d);
    joint << P, P * C.transpose(), C * P, S;
    const Vector x = random_vector(rng, r);
    Vector dev(r + d);
    dev << x - mu, y - C * mu;
    const double joint_m = dev.dot(joint.ldlt().solve(dev));
    const Matrix K = P * C.transpose() * S.inverse();
    const Vector x_post = mu + K * (y - C * mu);
    const Matrix P_post = P - K * C * P;
    const double cond_m = (x - x_post).dot(P_post.ldlt().solve(x - x_post));
    const double lambda = test::uniform(rng, 0.5, 10.0);
    const double expected = (lambda + joint_m - cond_m) / (lambda + static_cast<double>(d));
    EXPECT_NEAR(coefficient_scale_factor(y, C, mu, S, lambda), expected, 1e-8 * expected);
  }
}

TEST(DictionaryScale, Examples) {
  test::Rng rng(4);
  const Index d = 6;
  const Matrix C = random_matrix(rng, d, 2);
  const Matrix V = random_spd(rng, 2);
  const Vector mu = random_vector(rng, 2);
  const double eta = 0.4, lambda = 2.5;
  EXPECT_DOUBLE_EQ(dictionary_scale_factor(C * mu, C, mu, V, eta, lambda), lambda / (lambda + d));

  const double rho = mu.dot(V * mu) + eta;
  Vector e = random_vector(rng, d);
  e *= std::sqrt(d * rho) / e.norm();
  EXPECT_NEAR(dictionary_scale_factor(C * mu + e, C, mu, V, eta, lambda), 1.0, 1e-14);
}

TEST(DictionaryScale, ExpandedFormIdentity) {
  test::Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Index d = test::uniform_index(rng, 1, 10);
    const Matrix C = random_matrix(rng, d, 3);
    const Matrix V = random_spd(rng, 3);
    const Vector mu = random_vector(rng, 3);
    const Vector y = random_vector(rng, d);
    const double eta = test::uniform(rng, 0.01, 2.0), lambda = test::uniform(rng, 0.5, 20.0);
    const double rho = mu.dot(V * mu) + eta;
    const double expanded = lambda / (lambda + d) + (y - C * mu).squaredNorm() / ((lambda + d) * rho);
    EXPECT_NEAR(dictionary_scale_factor(y, C, mu, V, eta, lambda), expanded, 1e-13 * expanded);
  }
}

TEST(RobustStep, CovariancesAreScaledPsmfCovariances) {
  test::Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const Index d = test::uniform_index(rng, 2, 8);
    const Index r = test::uniform_index(rng, 1, 3);
    const auto model = SubspaceModel::random_walk(r);
    const NoiseConfig n = random_noise(rng, d, r);
    const double lambda0 = test::uniform(rng, 1.0, 10.0);
    const RobustState rs = RobustState::initial(n, model, lambda0);
    const Vector y = random_vector(rng, d, 2.0);
    const auto robust = robust_filter_step(rs, model, y);
    const auto plain = filter_step(rs.base, model, y);
    const double w = robust.trace.omega, p = robust.trace.phi;

    // means are untouched by robustification
    EXPECT_EQ(robust.state.base.coef.mean, plain.state.coef.mean);
    EXPECT_EQ(robust.state.base.dict.mean, plain.state.dict.mean);
    EXPECT_LT(rel_err(robust.state.base.coef.cov, w * plain.state.coef.cov), 1e-14);
    EXPECT_LT(rel_err(robust.state.base.dict.col_cov, p * plain.state.dict.col_cov), 1e-14);
    EXPECT_LT(rel_err(robust.state.R_current(), w * n.R), 1e-15);
    EXPECT_LT(rel_err(robust.state.Q_current(), w * n.Q), 1e-15);
    EXPECT_EQ(robust.state.lambda, lambda0 + d);

    // the scale factors follow the standalone formulas
    const auto pred = predict(rs.base, model);
    Matrix S = n.C0 * pred.P_bar * n.C0.transpose() + n.R;
    S.diagonal().array() += pred.mu_bar.dot(n.V0 * pred.mu_bar);
    EXPECT_NEAR(w, coefficient_scale_factor(y, n.C0, pred.mu_bar, S, lambda0), 1e-12 * w);
    EXPECT_NEAR(p, dictionary_scale_factor(y, n.C0, pred.mu_bar, n.V0, robust.trace.eta, lambda0), 1e-12 * p);
  }
}

TEST(RobustStep, UnitScaleFactorsReduceToPsmf) {
  // With Delta^2 = d for both statistics the robust step equals the PSMF step.
  const Index d = 4;
  NoiseConfig n;
  n.Q = Matrix::Zero(1, 1);
  n.P0 = Matrix::Zero(1, 1);  // S = R + z'Vz I, C P C' = 0
  n.V0 = Matrix::Zero(1, 1);  // rho = eta = tr(R)/d
  n.R = Matrix::Identity(d, d);
  n.mu0 = Vector::Ones(1);
  n.C0 = Matrix::Zero(d, 1);
  const auto model = SubspaceModel::random_walk(1);
  const Vector y = Vector::Ones(d);  // |e|^2 = d, S = I, rho = 1
  const RobustState rs = RobustState::initial(n, model, 2.0);
  const auto robust = robust_filter_step(rs, model, y);
  const auto plain = filter_step(rs.base, model, y);
  EXPECT_DOUBLE_EQ(robust.trace.omega, 1.0);
  EXPECT_DOUBLE_EQ(robust.trace.phi, 1.0);
  EXPECT_EQ(robust.state.base.coef.cov, plain.state.coef.cov);
  EXPECT_EQ(robust.state.base.dict.col_cov, plain.state.dict.col_cov);
  EXPECT_EQ(robust.state.R_current(), n.R);
}

TEST(RobustStep, DegreesOfFreedomGrowByDimension) {
  test::Rng rng(7);
  const Index d = 20;
  const auto model = SubspaceModel::random_walk(3);
  RobustState s = RobustState::initial(random_noise(rng, d, 3), model, 1.8);
  for (int k = 0; k < 5; ++k) s = robust_filter_step(s, model, random_vector(rng, d)).state;
  EXPECT_DOUBLE_EQ(s.lambda, 101.8);
  for (int k = 0; k < 95; ++k) s = robust_filter_step(s, model, random_vector(rng, d)).state;
  EXPECT_EQ(s.lambda, 1.8 + 100.0 * d);
}

TEST(RobustStep, MaskedStepsGrowByObservedCount) {
  test::Rng rng(8);
  const auto model = SubspaceModel::random_walk(2);
  RobustState s = RobustState::initial(random_noise(rng, 5, 2), model, 1.0);
  MaskVector mask(5);
  mask << true, false, true, false, false;
  s = robust_filter_step(s, model, random_vector(rng, 5), mask).state;
  EXPECT_EQ(s.lambda, 3.0);
  const Matrix R = s.R_current();
  s = robust_filter_step(s, model, random_vector(rng, 5), MaskVector::Constant(5, false)).state;
  EXPECT_EQ(s.lambda, 3.0);
  EXPECT_EQ(s.R_current(), R);
}

TEST(RobustStep, OutlierInflatesNoise) {
  test::Rng rng(9);
  const Index d = 10;
  const auto model = SubspaceModel::random_walk(2);
  NoiseConfig n = random_noise(rng, d, 2);
  n.R = 0.01 * Matrix::Identity(d, d);
  const RobustState rs = RobustState::initial(n, model, 1.8);
  const auto pred = predict(rs.base, model);
  Matrix S = n.C0 * pred.P_bar * n.C0.transpose() + n.R;
  S.diagonal().array() += pred.mu_bar.dot(n.V0 * pred.mu_bar);
  // residual of 100 predictive standard deviations in every dimension
  const Vector y = n.C0 * pred.mu_bar + 100.0 * S.diagonal().cwiseSqrt();
  const auto robust = robust_filter_step(rs, model, y);
  const auto plain = filter_step(rs.base, model, y);
  const double w = robust.trace.omega;
  EXPECT_GT(w, 10.0);
  EXPECT_LT(rel_err(robust.state.R_current(), w * n.R), 1e-15);
  EXPECT_NEAR((robust.state.base.coef.cov.array() / plain.state.coef.cov.array()).mean(), w, 1e-10 * w);
}

TEST(RobustStep, ScaleFactorsPositiveAndContractOnPerfectPrediction) {
  test::Rng rng(10);
  const Index d = 6;
  const auto model = SubspaceModel::random_walk(2);
  const NoiseConfig n = random_noise(rng, d, 2);
  const RobustState rs = RobustState::initial(n, model, 4.0);
  const auto pred = predict(rs.base, model);
  const auto out = robust_filter_step(rs, model, n.C0 * pred.mu_bar);
  EXPECT_DOUBLE_EQ(out.trace.omega, 4.0 / 10.0);
  EXPECT_DOUBLE_EQ(out.trace.phi, 4.0 / 10.0);
  for (int k = 0; k < 50; ++k) {
    const auto s = robust_filter_step(rs, model, random_vector(rng, d, test::uniform(rng, 0.01, 100.0)));
    EXPECT_GT(s.trace.omega, 0.0);
    EXPECT_GT(s.trace.phi, 0.0);
  }
}

TEST(RobustStep, ExtremeResidualIsClamped) {
  const Index d = 3;
  NoiseConfig n;
  n.Q = Matrix::Zero(1, 1);
  n.P0 = Matrix::Zero(1, 1);
  n.V0 = Matrix::Zero(1, 1);
  n.R = Matrix::Identity(d, d);
  n.mu0 = Vector::Ones(1);
  n.C0 = Matrix::Zero(d, 1);
  const auto model = SubspaceModel::random_walk(1);
  const auto out = robust_filter_step(RobustState::initial(n, model, 1.0), model, Vector::Constant(d, 1e6));
  EXPECT_TRUE(out.trace.scale_clamped);
  EXPECT_EQ(out.trace.omega, kScaleFactorCeil);
  EXPECT_EQ(out.trace.phi, kScaleFactorCeil);
  EXPECT_TRUE(out.state.R_current().allFinite());
}

TEST(RobustStep, GaussianLimit) {
  test::Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Index d = test::uniform_index(rng, 1, 8);
    const Index r = test::uniform_index(rng, 1, 4);
    const auto model = SubspaceModel::random_walk(r);
    const NoiseConfig n = random_noise(rng, d, r);
    const RobustState rs = RobustState::initial(n, model, 1e8);
    const Vector y = random_vector(rng, d);
    const auto robust = robust_filter_step(rs, model, y);
    const auto plain = filter_step(rs.base, model, y);
    EXPECT_LT(rel_err(robust.state.base.coef.mean, plain.state.coef.mean), 1e-4);
    EXPECT_LT(rel_err(robust.state.base.coef.cov, plain.state.coef.cov), 1e-4);
    EXPECT_LT(rel_err(robust.state.base.dict.mean, plain.state.dict.mean), 1e-4);
    EXPECT_LT(rel_err(robust.state.base.dict.col_cov, plain.state.dict.col_cov), 1e-4);
  }
}

TEST(RobustStep, MeansFollowPsmfGivenTheSameState) {
  test::Rng rng(12);
  const Index d = 5;
  const auto model = SubspaceModel::cosine_periodic(Vector::Constant(2, 0.02));
  RobustState s = RobustState::initial(random_noise(rng, d, 2), model, 1.8);
  for (int k = 0; k < 100; ++k) {
    const Vector y = random_vector(rng, d);
    const auto robust = robust_filter_step(s, model, y);
    const auto plain = filter_step(s.base, model, y);
    ASSERT_EQ(robust.state.base.coef.mean, plain.state.coef.mean);
    ASSERT_EQ(robust.state.base.dict.mean, plain.state.dict.mean);
    ASSERT_TRUE(is_symmetric(robust.state.base.coef.cov));
    ASSERT_TRUE(is_psd(robust.state.base.coef.cov));
    ASSERT_TRUE(is_psd(robust.state.base.dict.col_cov));
    s = robust.state;
  }
}

TEST(RobustState, RejectsNonPositiveDegreesOfFreedom) {
  test::Rng rng(13);
  EXPECT_THROW(RobustState::initial(random_noise(rng, 3, 1), SubspaceModel::random_walk(1), 0.0), ContractError);
}

}  // namespace
}  // namespace psmf
