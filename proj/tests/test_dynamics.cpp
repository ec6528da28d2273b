#include <cmath>
#include <numbers>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "wiplab/dynamics.hpp"
#include "wiplab/errors.hpp"
#include "wiplab/rng.hpp"

using namespace wiplab;

namespace {

// Constrained EOM as one dense 4x4 system in (p'', phi'', beta'', F).
double stick_force_oracle(const WipState& s, double tau, const WipParams& p) {
  const double m = p.wheel_mass + p.pole_mass;
  const double ml = p.pole_mass * p.pole_com;
  const double j = p.pole_inertia + ml * p.pole_com;
  const double c = std::cos(s.beta), sn = std::sin(s.beta);
  Eigen::Matrix4d a;
  Eigen::Vector4d b;
  a << m, 0, ml * c, -1,  //
      0, p.wheel_inertia, 0, p.wheel_radius,  //
      ml * c, 0, j, 0,  //
      1, -p.wheel_radius, 0, 0;
  b << ml * sn * s.beta_dot * s.beta_dot, tau, ml * p.gravity * sn - tau, 0;
  return a.fullPivLu().solve(b)(3);
}

WipState rolling(double p_dot, double beta, double beta_dot,
                 const WipParams& prm) {
  WipState s;
  s.p_dot = p_dot;
  s.phi_dot = p_dot / prm.wheel_radius;
  s.beta = beta;
  s.beta_dot = beta_dot;
  return s;
}

}  // namespace

TEST(PdTorque, Examples) {
  WipParams p;
  EXPECT_EQ(pd_torque(2.5, 2.5, p), 0.0);
  EXPECT_DOUBLE_EQ(pd_torque(1.0, 0.0, p), 3.0);
  EXPECT_DOUBLE_EQ(pd_torque(100.0, 0.0, p), 10.0);
  EXPECT_DOUBLE_EQ(pd_torque(-100.0, 0.0, p), -10.0);
}

TEST(StickForce, UprightRestNoTorqueIsZero) {
  WipParams p;
  EXPECT_NEAR(solve_stick_force(WipState{}, 0.0, p), 0.0, 1e-15);
}

TEST(StickForce, MatchesDenseSolve) {
  WipParams p;
  const double f = solve_stick_force(WipState{}, 1.0, p);
  EXPECT_NEAR(f, stick_force_oracle(WipState{}, 1.0, p), 1e-12);

  Rng rng = make_rng(7, "stick");
  for (int i = 0; i < 200; ++i) {
    WipState s = rolling(uniform(rng, -2, 2), uniform(rng, -0.5, 0.5),
                         uniform(rng, -3, 3), p);
    const double tau = uniform(rng, -10, 10);
    EXPECT_NEAR(solve_stick_force(s, tau, p), stick_force_oracle(s, tau, p),
                1e-9);
  }
}

TEST(StickForce, AgreesWithVeryHighFrictionStep) {
  WipParams p;
  p.mu = 1e6;
  const double tau = pd_torque(1.0 / 3.0, 0.0, p);  // 1 N m
  const StepResult r = step_detailed(WipState{}, 1.0 / 3.0, p);
  EXPECT_EQ(r.state.mode, ContactMode::Stick);
  EXPECT_NEAR(r.traction, solve_stick_force(WipState{}, tau, p), 1e-9);
}

TEST(StickForce, UprightWithoutTorqueNeedsNoTraction) {
  WipParams p;
  Rng rng = make_rng(3, "upright");
  for (int i = 0; i < 50; ++i) {
    WipState s = rolling(uniform(rng, -3, 3), 0.0, 0.0, p);
    s.p = uniform(rng, -1, 1);
    EXPECT_NEAR(solve_stick_force(s, 0.0, p), 0.0, 1e-12);
  }
}

TEST(Step, ZeroFrictionGivesZeroTraction) {
  WipParams p;
  p.mu = 0.0;
  const StepResult r = step_detailed(WipState{}, 10.0, p);
  EXPECT_EQ(r.traction, 0.0);
  EXPECT_GT(r.state.phi_dot, 0.0);
  EXPECT_EQ(r.state.mode, ContactMode::Slip);
  // No external horizontal force: the reaction torque on the pole may move
  // the axle, but the system's horizontal momentum stays zero.
  const double momentum =
      (p.wheel_mass + p.pole_mass) * r.state.p_dot +
      p.pole_mass * p.pole_com * std::cos(0.0) * r.state.beta_dot;
  EXPECT_NEAR(momentum, 0.0, 1e-12);
}

TEST(Step, HighFrictionKeepsRolling) {
  WipParams p;
  p.mu = 10.0;
  WipState s;
  s.beta = 0.02;
  double worst = 0.0;
  for (int k = 0; k < 4000; ++k) {
    const double cmd = 5.0 * std::sin(0.01 * k) + 2.0 * std::sin(0.137 * k);
    s = step(s, cmd, p);
    ASSERT_EQ(s.mode, ContactMode::Stick) << "step " << k;
    worst = std::max(worst, std::abs(s.slip_velocity(p.wheel_radius)));
  }
  EXPECT_LE(worst, 1e-9);
}

double energy_drift(double beta0, double dt) {
  WipParams p;
  p.mu = 10.0;
  p.k_d = 0.0;  // tau = 0 for any command
  p.dt = dt;
  WipState s;
  s.beta = beta0;
  const double e0 = mechanical_energy(s, p);
  double worst = 0.0;
  const int n = static_cast<int>(std::lround(10.0 / dt));
  for (int k = 0; k < n; ++k) {
    const StepResult r = step_detailed(s, 0.0, p);
    EXPECT_EQ(r.torque, 0.0);
    EXPECT_EQ(r.state.mode, ContactMode::Stick);
    s = r.state;
    worst = std::max(worst, std::abs(mechanical_energy(s, p) - e0));
  }
  return worst / std::abs(e0);
}

TEST(Step, EnergyConservedWithoutTorque) {
  // Pole swinging 0.5 rad about the hanging position, 4000 steps.
  EXPECT_LT(energy_drift(std::numbers::pi - 0.5, 1.0 / 400.0), 0.01);
}

TEST(Step, EnergyDriftIsFirstOrderInDt) {
  // Released near upright the pole tumbles at high speed and the explicit
  // velocity terms lose energy; the loss must shrink with the step.
  const double coarse = energy_drift(0.1, 1.0 / 400.0);
  const double fine = energy_drift(0.1, 1.0 / 4000.0);
  EXPECT_LT(fine, 0.2 * coarse);
  EXPECT_LT(fine, 0.02);
}

TEST(Step, TractionNeverExceedsCoulombBound) {
  WipParams p;
  Rng rng = make_rng(11, "bound");
  for (double mu : {0.0, 0.05, 0.2, 0.5, 1.5}) {
    p.mu = mu;
    WipState s;
    for (int k = 0; k < 3000; ++k) {
      const double cmd = uniform(rng, -20, 20);
      const StepResult r = step_detailed(s, cmd, p);
      ASSERT_LE(std::abs(r.traction), mu * p.normal_force() + 1e-9);
      if (r.state.mode == ContactMode::Stick) {
        ASSERT_LE(std::abs(r.state.slip_velocity(p.wheel_radius)), 1e-9);
      }
      s = r.state;
      if (std::abs(s.beta) > 1.0) s = WipState{};
    }
  }
}

TEST(Step, LowFrictionHardCommandSlips) {
  WipParams p;
  p.mu = 0.05;
  WipState s;
  bool slipped = false;
  for (int k = 0; k < 40; ++k) {
    s = step(s, 20.0, p);
    slipped = slipped || s.mode == ContactMode::Slip;
  }
  EXPECT_TRUE(slipped);
  EXPECT_GT(std::abs(s.slip_velocity(p.wheel_radius)), 1e-3);
}

TEST(Step, Deterministic) {
  WipParams p;
  p.mu = 0.3;
  WipState a, b;
  a.beta = b.beta = 0.05;
  for (int k = 0; k < 500; ++k) {
    const double cmd = 15.0 * std::sin(0.05 * k);
    a = step(a, cmd, p);
    b = step(b, cmd, p);
  }
  EXPECT_EQ(a.p, b.p);
  EXPECT_EQ(a.p_dot, b.p_dot);
  EXPECT_EQ(a.phi, b.phi);
  EXPECT_EQ(a.phi_dot, b.phi_dot);
  EXPECT_EQ(a.beta, b.beta);
  EXPECT_EQ(a.beta_dot, b.beta_dot);
  EXPECT_EQ(a.mode, b.mode);
}

TEST(Step, RejectsNonFiniteInput) {
  WipParams p;
  WipState s;
  s.beta = std::nan("");
  EXPECT_THROW(step(s, 0.0, p), NonFiniteState);
  EXPECT_THROW(step(WipState{}, INFINITY, p), NonFiniteState);
}

TEST(Params, ValidateRejectsNonPhysical) {
  WipParams p;
  EXPECT_NO_THROW(p.validate());
  p.wheel_mass = 0.0;
  EXPECT_THROW(p.validate(), SingularMass);
  p = WipParams{};
  p.mu = -0.1;
  EXPECT_THROW(p.validate(), SingularMass);
  p = WipParams{};
  p.dt = 0.0;
  EXPECT_THROW(p.validate(), SingularMass);
}

TEST(SlipRatio, Examples) {
  WipParams p;
  WipState s;
  s.phi_dot = 10.0;
  s.p_dot = 1.0;
  EXPECT_NEAR(slip_ratio(s, p), 0.0, 1e-15);
  s.p_dot = 0.0;
  EXPECT_NEAR(slip_ratio(s, p), 1.0 / (0.2 * std::numbers::pi), 1e-12);
  EXPECT_NEAR(slip_ratio(s, p), 1.59155, 1e-5);
  s.phi_dot = 0.0;
  s.p_dot = 1.0;
  EXPECT_NEAR(slip_ratio(s, p), -1.59155, 1e-5);
}

TEST(FrictionSign, Examples) {
  EXPECT_EQ(friction_sign_estimate(0.0, 0.7), 0.0);
  EXPECT_EQ(friction_sign_estimate(1.2, 0.7), 0.7);
  EXPECT_EQ(friction_sign_estimate(-0.3, 0.7), -0.7);
}
