#include "wiplab/lqr.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/MatrixFunctions>

#include "wiplab/errors.hpp"

namespace wiplab {

LinearModel linearize(const WipParams& prm, double dt) {
  prm.validate();
  const double r = prm.wheel_radius;
  const double ml = prm.pole_mass * prm.pole_com;
  const double pole_j = prm.pole_inertia + ml * prm.pole_com;
  // Rolling eliminates phi and F; the wheel adds I_w / r^2 of apparent mass.
  const double mass = prm.wheel_mass + prm.pole_mass + prm.wheel_inertia / (r * r);
  const double det = mass * pole_j - ml * ml;
  if (!(det > 0.0)) throw SingularMass("linearized mass matrix is singular");
  const double mgl = ml * prm.gravity;

  LinearModel m;
  m.dt = dt;
  m.a_cont(0, 1) = 1.0;
  m.a_cont(1, 2) = -ml * mgl / det;
  m.a_cont(2, 3) = 1.0;
  m.a_cont(3, 2) = mass * mgl / det;
  m.b_cont(1) = (pole_j / r + ml) / det;
  m.b_cont(3) = -(mass + ml / r) / det;
  discretize_zoh(m.a_cont, m.b_cont, dt, m.a, m.b);
  return m;
}

void discretize_zoh(const Matrix4& a_cont, const Vector4& b_cont, double dt,
                    Matrix4& a, Vector4& b) {
  Eigen::Matrix<double, 5, 5> aug = Eigen::Matrix<double, 5, 5>::Zero();
  aug.topLeftCorner<4, 4>() = a_cont * dt;
  aug.topRightCorner<4, 1>() = b_cont * dt;
  const Eigen::Matrix<double, 5, 5> e = aug.exp();
  a = e.topLeftCorner<4, 4>();
  b = e.topRightCorner<4, 1>();
}

namespace {

// The stopping rule is relative; a few more sweeps push the absolute
// residual down to rounding level. Keeps the best iterate seen.
Eigen::MatrixXd polish(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                       const Eigen::MatrixXd& q, double r, Eigen::MatrixXd p) {
  Eigen::MatrixXd best = p;
  double best_res = dare_residual(a, b, q, r, p);
  for (int it = 0; it < 200 && best_res > 0.0; ++it) {
    const Eigen::MatrixXd btp = b.transpose() * p;
    const double s = r + (btp * b)(0, 0);
    const Eigen::MatrixXd btpa = btp * a;
    p = q + a.transpose() * p * a - btpa.transpose() * btpa / s;
    p = 0.5 * (p + p.transpose());
    const double res = dare_residual(a, b, q, r, p);
    if (res < best_res) {
      best_res = res;
      best = p;
    }
  }
  return best;
}

}  // namespace

Eigen::MatrixXd dare_iterate(const Eigen::MatrixXd& a,
                             const Eigen::MatrixXd& b,
                             const Eigen::MatrixXd& q, double r,
                             int max_iterations, double tolerance,
                             int* iterations) {
  Eigen::MatrixXd p = q;
  for (int it = 1; it <= max_iterations; ++it) {
    const Eigen::MatrixXd btp = b.transpose() * p;
    const double s = r + (btp * b)(0, 0);
    const Eigen::MatrixXd btpa = btp * a;
    Eigen::MatrixXd next =
        q + a.transpose() * p * a - btpa.transpose() * btpa / s;
    next = 0.5 * (next + next.transpose());
    if (!next.allFinite()) break;
    const double delta = (next - p).cwiseAbs().rowwise().sum().maxCoeff();
    p = std::move(next);
    // Relative to the magnitude of P so large solutions can still converge
    // in double precision.
    const double scale =
        std::max(1.0, p.cwiseAbs().rowwise().sum().maxCoeff());
    if (delta < tolerance * scale) {
      if (iterations) *iterations = it;
      return polish(a, b, q, r, std::move(p));
    }
  }
  throw NoConvergence("discrete Riccati iteration did not converge");
}

LqrGains dare_solve(const LinearModel& model, const Matrix4& q, double r) {
  if (!(r > 0.0)) throw NoConvergence("LQR input weight must be positive");
  LqrGains g;
  const Eigen::MatrixXd a = model.a;
  const Eigen::MatrixXd b = model.b;
  g.p = dare_iterate(a, b, q, r, 100000, 1e-12, &g.iterations);
  const double s = r + (model.b.transpose() * g.p * model.b)(0, 0);
  g.k = (model.b.transpose() * g.p * model.a) / s;
  return g;
}

double dare_residual(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                     const Eigen::MatrixXd& q, double r,
                     const Eigen::MatrixXd& p) {
  const double s = r + (b.transpose() * p * b)(0, 0);
  const Eigen::MatrixXd btpa = b.transpose() * p * a;
  const Eigen::MatrixXd rhs =
      q + a.transpose() * p * a - btpa.transpose() * btpa / s;
  return (p - rhs).cwiseAbs().rowwise().sum().maxCoeff();
}

double spectral_radius(const Eigen::MatrixXd& m) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double lqr_torque(const LqrGains& gains, const WipState& s, CommandSample cmd) {
  const Vector4 err(s.p - cmd.position, s.p_dot - cmd.velocity, s.beta,
                    s.beta_dot);
  return -(gains.k * err)(0, 0);
}

double lqr_action(const LqrGains& gains, const WipState& s, CommandSample cmd,
                  const WipParams& params, double v_max) {
  const double u = lqr_torque(gains, s, cmd);
  if (params.k_d <= 0.0) return std::clamp(s.phi_dot, -v_max, v_max);
  return std::clamp(s.phi_dot + u / params.k_d, -v_max, v_max);
}

}  // namespace wiplab
