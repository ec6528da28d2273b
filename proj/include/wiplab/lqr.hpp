#pragma once

// Friction-blind LQR baseline: linearization of the rolling (stick) dynamics
// about the upright equilibrium, discrete Riccati solution, tracking law.

#include <Eigen/Core>

#include "wiplab/dynamics.hpp"
#include "wiplab/env.hpp"

namespace wiplab {

using Matrix4 = Eigen::Matrix4d;
using Vector4 = Eigen::Vector4d;
using RowVector4 = Eigen::RowVector4d;

// State ordering [p, p_dot, beta, beta_dot]; input is wheel torque.
struct LinearModel {
  Matrix4 a_cont = Matrix4::Zero();
  Vector4 b_cont = Vector4::Zero();
  Matrix4 a = Matrix4::Identity();  // zero-order-hold discretization
  Vector4 b = Vector4::Zero();
  double dt = 0.02;
};

struct LqrGains {
  RowVector4 k = RowVector4::Zero();
  Matrix4 p = Matrix4::Zero();
  int iterations = 0;
};

struct LqrWeights {
  Eigen::Vector4d q_diag{10.0, 1.0, 50.0, 1.0};
  double r = 0.1;
};

LinearModel linearize(const WipParams& params, double dt = 0.02);

// Zero-order-hold discretization of x' = A x + B u.
void discretize_zoh(const Matrix4& a_cont, const Vector4& b_cont, double dt,
                    Matrix4& a, Vector4& b);

// Fixed-point iteration of the discrete Riccati recursion. Generic in the
// state dimension so the scalar case can be solved by the same code.
Eigen::MatrixXd dare_iterate(const Eigen::MatrixXd& a,
                             const Eigen::MatrixXd& b,
                             const Eigen::MatrixXd& q, double r,
                             int max_iterations = 100000,
                             double tolerance = 1e-12,
                             int* iterations = nullptr);

LqrGains dare_solve(const LinearModel& model, const Matrix4& q, double r);

// ||P - (Q + A'PA - A'PB (R + B'PB)^-1 B'PA)||_inf
double dare_residual(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                     const Eigen::MatrixXd& q, double r,
                     const Eigen::MatrixXd& p);

double spectral_radius(const Eigen::MatrixXd& m);

// Torque law u = -K [p - c_pos, p_dot - c_vel, beta, beta_dot], mapped onto
// the velocity actuator through the inverse PD relation.
double lqr_torque(const LqrGains& gains, const WipState& s, CommandSample cmd);
double lqr_action(const LqrGains& gains, const WipState& s, CommandSample cmd,
                  const WipParams& params, double v_max);

}  // namespace wiplab
