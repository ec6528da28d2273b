#include "wiplab/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "wiplab/errors.hpp"

namespace wiplab {
namespace {

double sign(double x) { return (x > 0.0) - (x < 0.0); }

// Below this contact speed a slipping wheel may lock back into rolling.
constexpr double kStickReentrySpeed = 1e-6;

}  // namespace

void WipParams::validate() const {
  const bool positive = wheel_mass > 0 && pole_mass > 0 && wheel_radius > 0 &&
                        pole_com > 0 && wheel_inertia > 0 && pole_inertia > 0 &&
                        dt > 0;
  const bool non_negative = mu >= 0 && k_d >= 0 && tau_max >= 0 && gravity >= 0;
  if (!positive || !non_negative) {
    throw SingularMass("invalid WIP parameters: masses, inertias, radius, "
                       "COM distance and dt must be positive; mu, k_d, "
                       "tau_max must be non-negative");
  }
}

bool WipState::finite() const {
  return std::isfinite(p) && std::isfinite(p_dot) && std::isfinite(phi) &&
         std::isfinite(phi_dot) && std::isfinite(beta) &&
         std::isfinite(beta_dot);
}

AccelerationModel acceleration_model(const WipState& s, double tau,
                                     const WipParams& prm) {
  const double total_mass = prm.wheel_mass + prm.pole_mass;
  const double ml = prm.pole_mass * prm.pole_com;
  const double pole_j = prm.pole_inertia + ml * prm.pole_com;
  const double c = std::cos(s.beta);
  const double sn = std::sin(s.beta);
  const double coupling = ml * c;
  const double det = total_mass * pole_j - coupling * coupling;
  if (!(det > 0.0) || !(prm.wheel_inertia > 0.0) || !std::isfinite(det)) {
    throw SingularMass("constrained mass matrix is singular");
  }

  // Translational / pitch block with right-hand side (b1, b3).
  auto solve_block = [&](double b1, double b3, double& p_acc, double& b_acc) {
    p_acc = (pole_j * b1 - coupling * b3) / det;
    b_acc = (total_mass * b3 - coupling * b1) / det;
  };

  AccelerationModel m{};
  solve_block(ml * sn * s.beta_dot * s.beta_dot,
              ml * prm.gravity * sn - tau, m.p_base, m.beta_base);
  m.phi_base = tau / prm.wheel_inertia;
  solve_block(1.0, 0.0, m.p_per_force, m.beta_per_force);
  m.phi_per_force = -prm.wheel_radius / prm.wheel_inertia;
  return m;
}

double pd_torque(double desired_wheel_velocity, double phi_dot,
                 const WipParams& params) {
  return std::clamp(params.k_d * (desired_wheel_velocity - phi_dot),
                    -params.tau_max, params.tau_max);
}

double solve_stick_force(const WipState& s, double tau,
                         const WipParams& params) {
  const AccelerationModel m = acceleration_model(s, tau, params);
  const double r = params.wheel_radius;
  return -m.slip_base(r) / m.slip_per_force(r);
}

StepResult step_detailed(const WipState& s, double desired_wheel_velocity,
                         const WipParams& prm) {
  if (!s.finite() || !std::isfinite(desired_wheel_velocity)) {
    throw NonFiniteState("step called with a non-finite state or command");
  }
  const double r = prm.wheel_radius;
  const double dt = prm.dt;
  const double tau = pd_torque(desired_wheel_velocity, s.phi_dot, prm);
  const AccelerationModel m = acceleration_model(s, tau, prm);

  const double slip = s.slip_velocity(r);
  const double slip_acc0 = m.slip_base(r);
  const double slip_gain = m.slip_per_force(r);  // > 0
  const double limit = prm.mu * prm.normal_force();

  // Traction that leaves zero contact velocity at the end of the step. From
  // a rolling state this is the acceleration-level stick force.
  const double f_required = -(slip / dt + slip_acc0) / slip_gain;

  double traction = 0.0;
  ContactMode mode = ContactMode::Slip;
  if (s.mode == ContactMode::Stick) {
    if (std::abs(f_required) <= limit) {
      traction = f_required;
      mode = ContactMode::Stick;
    } else {
      // Breakaway: saturate in the direction the stick force was acting.
      traction = limit * sign(f_required);
    }
  } else {
    const double kinetic =
        slip != 0.0 ? -limit * sign(slip) : limit * sign(f_required);
    const double slip_next = slip + dt * (slip_acc0 + slip_gain * kinetic);
    const bool crosses = sign(slip_next) != sign(slip);
    if (std::abs(slip) < kStickReentrySpeed || crosses) {
      if (std::abs(f_required) <= limit) {
        traction = f_required;
        mode = ContactMode::Stick;
      } else {
        traction = limit * sign(f_required);
      }
    } else {
      traction = kinetic;
    }
  }

  StepResult out;
  out.torque = tau;
  out.traction = traction;
  WipState& n = out.state;
  n.mode = mode;
  n.p_dot = s.p_dot + dt * (m.p_base + traction * m.p_per_force);
  n.phi_dot = s.phi_dot + dt * (m.phi_base + traction * m.phi_per_force);
  n.beta_dot = s.beta_dot + dt * (m.beta_base + traction * m.beta_per_force);
  if (mode == ContactMode::Stick) {
    // Remove rounding residue from the rolling constraint.
    n.p_dot = r * n.phi_dot;
  }
  n.p = s.p + dt * n.p_dot;
  n.phi = s.phi + dt * n.phi_dot;
  n.beta = s.beta + dt * n.beta_dot;
  if (!n.finite()) {
    throw NonFiniteState("integration produced a non-finite state");
  }
  return out;
}

double slip_ratio(const WipState& s, const WipParams& params) {
  const double r = params.wheel_radius;
  return (r * s.phi_dot - s.p_dot) / (2.0 * std::numbers::pi * r);
}

double friction_sign_estimate(double gamma, double mu) {
  return mu * sign(gamma);
}

double mechanical_energy(const WipState& s, const WipParams& prm) {
  const double total_mass = prm.wheel_mass + prm.pole_mass;
  const double ml = prm.pole_mass * prm.pole_com;
  const double pole_j = prm.pole_inertia + ml * prm.pole_com;
  const double kinetic =
      0.5 * total_mass * s.p_dot * s.p_dot +
      ml * std::cos(s.beta) * s.p_dot * s.beta_dot +
      0.5 * pole_j * s.beta_dot * s.beta_dot +
      0.5 * prm.wheel_inertia * s.phi_dot * s.phi_dot;
  const double potential = ml * prm.gravity * std::cos(s.beta);
  return kinetic + potential;
}

}  // namespace wiplab
