#pragma once

// Planar wheeled inverted pendulum with a hybrid stick/slip Coulomb contact.
//
// Generalized coordinates (p, phi, beta): axle translation, absolute wheel
// angle, pole pitch from upright. With traction force F acting on the wheel at
// the ground contact and motor torque tau between wheel and pole:
//
//   (m_w + m_p) p'' + m_p l cos(b) b'' - m_p l sin(b) b'^2 = F
//   I_w phi''                                              = tau - r F
//   (I_p + m_p l^2) b'' + m_p l cos(b) p'' - m_p g l sin(b) = -tau
//
// The normal load is quasi-static, N = (m_w + m_p) g, and a single friction
// coefficient bounds |F| <= mu N.

#include <cstdint>

namespace wiplab {

enum class ContactMode : std::uint8_t { Stick, Slip };

struct WipParams {
  double wheel_mass = 1.0;       // kg
  double pole_mass = 2.0;        // kg
  double wheel_radius = 0.1;     // m
  double pole_com = 0.3;         // axle to pole COM, m
  double wheel_inertia = 0.005;  // kg m^2
  double pole_inertia = 0.06;    // about the pole COM, kg m^2
  double gravity = 9.81;         // m/s^2
  double mu = 1.0;               // effective contact friction coefficient
  double k_d = 3.0;              // wheel velocity gain, N m s/rad
  double tau_max = 10.0;         // N m
  double dt = 1.0 / 400.0;       // physics step, s

  // Throws SingularMass when a mass/inertia/length is not strictly positive
  // or a coefficient is negative.
  void validate() const;
  double normal_force() const { return (wheel_mass + pole_mass) * gravity; }
};

struct WipState {
  double p = 0.0;         // m
  double p_dot = 0.0;     // m/s
  double phi = 0.0;       // rad
  double phi_dot = 0.0;   // rad/s
  double beta = 0.0;      // rad
  double beta_dot = 0.0;  // rad/s
  ContactMode mode = ContactMode::Stick;

  bool finite() const;
  // Contact point velocity p_dot - r phi_dot; zero while rolling.
  double slip_velocity(double wheel_radius) const {
    return p_dot - wheel_radius * phi_dot;
  }
};

// Accelerations are affine in the traction force: q'' = base + F * per_force.
struct AccelerationModel {
  double p_base, phi_base, beta_base;
  double p_per_force, phi_per_force, beta_per_force;

  // d/dt of the slip velocity as a function of traction.
  double slip_base(double r) const { return p_base - r * phi_base; }
  double slip_per_force(double r) const {
    return p_per_force - r * phi_per_force;
  }
};

AccelerationModel acceleration_model(const WipState& s, double tau,
                                     const WipParams& params);

// Velocity-mode wheel actuator with k_p = 0.
double pd_torque(double desired_wheel_velocity, double phi_dot,
                 const WipParams& params);

// Traction that keeps p'' = r phi''.
double solve_stick_force(const WipState& s, double tau,
                         const WipParams& params);

struct StepResult {
  WipState state;
  double traction = 0.0;  // applied F_t, N
  double torque = 0.0;    // applied motor torque, N m
};

// One semi-implicit Euler step of params.dt with the wheel velocity command
// held. Throws NonFiniteState when the result is not finite.
StepResult step_detailed(const WipState& s, double desired_wheel_velocity,
                         const WipParams& params);

inline WipState step(const WipState& s, double desired_wheel_velocity,
                     const WipParams& params) {
  return step_detailed(s, desired_wheel_velocity, params).state;
}

// Absolute slip (r phi_dot - p_dot) / (2 pi r).
double slip_ratio(const WipState& s, const WipParams& params);

// mu sign(gamma), sign(0) = 0.
double friction_sign_estimate(double gamma, double mu);

// Kinetic plus gravitational potential energy (pole COM height l cos(beta)).
double mechanical_energy(const WipState& s, const WipParams& params);

}  // namespace wiplab
