#include <cmath>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "wiplab/errors.hpp"
#include "wiplab/lqr.hpp"

using namespace wiplab;

namespace {

// Rolling-mode vector field over [p, p_dot, beta, beta_dot] with torque input.
Vector4 stick_field(const Vector4& x, double tau, const WipParams& prm) {
  WipState s;
  s.p = x(0);
  s.p_dot = x(1);
  s.phi_dot = x(1) / prm.wheel_radius;
  s.beta = x(2);
  s.beta_dot = x(3);
  const AccelerationModel m = acceleration_model(s, tau, prm);
  const double f = solve_stick_force(s, tau, prm);
  return {x(1), m.p_base + f * m.p_per_force, x(3),
          m.beta_base + f * m.beta_per_force};
}

Matrix4 default_q() { return LqrWeights{}.q_diag.asDiagonal(); }

}  // namespace

TEST(Linearize, InvertedPendulumSign) {
  const LinearModel m = linearize(WipParams{});
  EXPECT_GT(m.a_cont(3, 2), 0.0);
  EXPECT_EQ(m.dt, 0.02);
}

TEST(Linearize, MatchesFiniteDifferences) {
  const WipParams prm;
  const LinearModel m = linearize(prm);
  const double h = 1e-6;
  for (int j = 0; j < 4; ++j) {
    Vector4 dx = Vector4::Zero();
    dx(j) = h;
    const Vector4 col =
        (stick_field(dx, 0.0, prm) - stick_field(-dx, 0.0, prm)) / (2 * h);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(m.a_cont(i, j), col(i), 1e-5);
  }
  const Vector4 bcol = (stick_field(Vector4::Zero(), h, prm) -
                        stick_field(Vector4::Zero(), -h, prm)) / (2 * h);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(m.b_cont(i), bcol(i), 1e-5);
}

TEST(Linearize, ZohLimitIsIdentity) {
  const LinearModel m = linearize(WipParams{}, 1e-8);
  EXPECT_LT((m.a - Matrix4::Identity()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Dare, ScalarClosedForm) {
  const Eigen::MatrixXd one = Eigen::MatrixXd::Identity(1, 1);
  const Eigen::MatrixXd p = dare_iterate(one, one, one, 1.0);
  const double golden = (1.0 + std::sqrt(5.0)) / 2.0;
  EXPECT_NEAR(p(0, 0), golden, 1e-10);
  EXPECT_NEAR(p(0, 0) / (1.0 + p(0, 0)), 1.0 / golden, 1e-10);  // K
}

TEST(Dare, UncontrollableUnstableFails) {
  Eigen::MatrixXd a(2, 2);
  a << 1.2, 0, 0, 0.5;
  const Eigen::MatrixXd b = Eigen::MatrixXd::Zero(2, 1);
  EXPECT_THROW(dare_iterate(a, b, Eigen::MatrixXd::Identity(2, 2), 1.0),
               NoConvergence);
}

TEST(Dare, WipSolution) {
  const LinearModel m = linearize(WipParams{});
  const LqrGains g = dare_solve(m, default_q(), 0.1);
  EXPECT_LT(dare_residual(m.a, m.b, default_q(), 0.1, g.p), 1e-9);
  EXPECT_LT((g.p - g.p.transpose()).cwiseAbs().maxCoeff(), 1e-9);
  Eigen::SelfAdjointEigenSolver<Matrix4> eig(g.p);
  EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
  const Matrix4 closed = m.a - m.b * g.k;
  EXPECT_LT(spectral_radius(closed), 1.0);
  // K = (R + B'PB)^-1 B'PA
  const double s = 0.1 + (m.b.transpose() * g.p * m.b)(0, 0);
  const RowVector4 k = m.b.transpose() * g.p * m.a / s;
  EXPECT_LT((k - g.k).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(LqrAction, OnTrajectoryIsNeutral) {
  const WipParams prm;
  const LqrGains g = dare_solve(linearize(prm), default_q(), 0.1);
  WipState s;
  s.p = 0.2;
  s.p_dot = 0.1;
  s.phi_dot = 1.0;
  EXPECT_EQ(lqr_torque(g, s, {0.2, 0.1}), 0.0);
  EXPECT_EQ(lqr_action(g, s, {0.2, 0.1}, prm, 20.0), 1.0);
}

TEST(LqrAction, PositionErrorPushesTowardTarget) {
  WipParams prm;
  prm.mu = 10.0;
  const LqrGains g = dare_solve(linearize(prm), default_q(), 0.1);
  const CommandSample target{0.1, 0.0};
  EXPECT_NEAR(lqr_torque(g, WipState{}, target), g.k(0) * 0.1, 1e-15);
  // Closed loop from rest behind the target ends up at the target.
  WipState s;
  double a = 0.0;
  for (int k = 0; k < 400 * 5; ++k) {
    if (k % 8 == 0) a = lqr_action(g, s, target, prm, 20.0);
    s = step(s, a, prm);
  }
  EXPECT_NEAR(s.p, 0.1, 5e-3);
}

TEST(LqrAction, RecoversFromTiltAtHighFriction) {
  WipParams prm;
  prm.mu = 10.0;
  const LqrGains g = dare_solve(linearize(prm), default_q(), 0.1);
  WipState s;
  s.beta = 0.05;
  double a = 0.0;
  for (int k = 0; k < 400 * 3; ++k) {
    if (k % 8 == 0) a = lqr_action(g, s, {}, prm, 20.0);
    s = step(s, a, prm);
  }
  EXPECT_LT(std::abs(s.beta), 0.01);
}

TEST(LqrAction, FrictionBlind) {
  WipParams lo, hi;
  lo.mu = 0.2;
  hi.mu = 5.0;
  const LqrGains g = dare_solve(linearize(lo), default_q(), 0.1);
  const LqrGains g2 = dare_solve(linearize(hi), default_q(), 0.1);
  EXPECT_EQ(g.k, g2.k);
  WipState s;
  s.beta = 0.03;
  s.phi_dot = 2.0;
  EXPECT_EQ(lqr_action(g, s, {0.1, 0.0}, lo, 20.0),
            lqr_action(g, s, {0.1, 0.0}, hi, 20.0));
}
