#include "wiplab/env.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "wiplab/errors.hpp"

namespace wiplab {

Command Command::rest_to_rest(double target, double duration) {
  // s(t) = target (10 u^3 - 15 u^4 + 6 u^5), u = t / duration
  Command c;
  c.duration = duration;
  c.target = target;
  const double d3 = duration * duration * duration;
  c.coeffs = {0.0, 0.0, 0.0, 10.0 * target / d3,
              -15.0 * target / (d3 * duration),
              6.0 * target / (d3 * duration * duration)};
  return c;
}

CommandSample quintic_sample(const Command& cmd, double t) {
  if (t >= cmd.duration) return {cmd.target, 0.0};
  t = std::max(t, 0.0);
  const auto& c = cmd.coeffs;
  const double pos =
      c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
  const double vel = c[1] + t * (2 * c[2] + t * (3 * c[3] +
                                                 t * (4 * c[4] + t * 5 * c[5])));
  return {pos, vel};
}

double curriculum_gate(const CurriculumState& cs) {
  return (std::tanh(cs.mean_episode_length / cs.t_max * 8.0 - 3.0) + 1.0) /
         2.0;
}

double reward(const WipState& s, double action, double zeta,
              double tracking_error, const RewardConfig& cfg,
              const WipParams& params) {
  const double a2 = action * action;
  const double balance = 1.0 - s.beta * s.beta;
  const double oscillation = cfg.velocity_penalty * std::abs(s.p_dot) +
                             cfg.pitch_rate_penalty * std::abs(s.beta_dot);
  const double slip =
      cfg.slip_weight * std::abs(s.p_dot - params.wheel_radius * s.phi_dot);
  const double a_track2 = cfg.tracking_uses_action
                              ? a2
                              : cfg.tracking_action * cfg.tracking_action;
  const double tracking = cfg.tracking_weight * zeta /
                          (tracking_error + cfg.tracking_offset) * a_track2;
  const double output =
      (cfg.output_penalty_low +
       (cfg.output_penalty_high - cfg.output_penalty_low) * zeta) *
      a2;
  return balance - oscillation - slip + tracking - output;
}

Observation observe(const WipState& s, double a_prev, CommandSample cmd,
                    double mu_hat, ObsMode mode, const EnvConfig& cfg) {
  Observation o;
  o.x_w = s.phi;
  o.x_w_dot = s.phi_dot;
  o.beta = s.beta;
  o.beta_dot = s.beta_dot;
  if (mode == ObsMode::Training) {
    o.x_tr = s.p;
    o.x_tr_dot = s.p_dot;
  } else {
    // Wheel odometry stands in for the translation joint.
    o.x_tr = cfg.sim.wheel_radius * s.phi;
    o.x_tr_dot = cfg.sim.wheel_radius * s.phi_dot;
  }
  o.a_prev = a_prev;
  o.c_pos = cmd.position;
  o.c_vel = cmd.velocity;
  o.mu_hat = std::clamp(mu_hat, 0.0, cfg.mu_max);
  return o;
}

double randomize_friction(Rng& rng, double lo, double hi) {
  if (lo == hi) return lo;
  return uniform(rng, lo, hi);
}

EpisodeSetup sample_episode(const EnvConfig& cfg, Rng& command_rng) {
  EpisodeSetup e;
  const double target = uniform(command_rng, -cfg.target_range, cfg.target_range);
  e.command = Command::rest_to_rest(target, cfg.command_duration);
  e.initial = WipState{};
  if (cfg.init_beta > 0.0) {
    e.initial.beta = uniform(command_rng, -cfg.init_beta, cfg.init_beta);
  }
  return e;
}

WipEnv::WipEnv(EnvConfig cfg, ObsMode mode)
    : cfg_(std::move(cfg)), sim_(cfg_.sim), mode_(mode) {
  cfg_.sim.validate();
}

void WipEnv::reset(const EpisodeSetup& setup) {
  setup_ = setup;
  sim_ = cfg_.sim;
  sim_.mu = setup.mu;
  state_ = setup.initial;
  a_prev_ = 0.0;
  steps_ = 0;
  done_ = false;
}

CommandSample WipEnv::command_now() const {
  return quintic_sample(setup_.command, time());
}

Observation WipEnv::observe() const { return observe(mode_); }

Observation WipEnv::observe(ObsMode mode) const {
  return wiplab::observe(state_, a_prev_, command_now(), setup_.mu_hat, mode,
                         cfg_);
}

StepOutcome WipEnv::step(double action, double zeta) {
  if (done_) throw EpisodeFinished("step called on a finished episode");
  if (!std::isfinite(action)) action = 0.0;
  action = std::clamp(action, -cfg_.v_max, cfg_.v_max);

  StepOutcome out;
  bool blew_up = false;
  const double r = sim_.wheel_radius;
  for (int k = 0; k < cfg_.decimation; ++k) {
    try {
      state_ = wiplab::step(state_, action, sim_);
    } catch (const NonFiniteState&) {
      blew_up = true;
      break;
    }
    ++physics_steps_;
    out.slip_distance += std::abs(state_.slip_velocity(r)) * sim_.dt;
  }
  ++steps_;
  a_prev_ = action;

  const CommandSample cmd = command_now();
  out.time = time();
  out.tracking_error = blew_up ? 0.0 : std::abs(state_.p - cmd.position);
  out.failed = blew_up || std::abs(state_.beta) > cfg_.beta_fail;
  out.timeout = !out.failed && steps_ >= cfg_.t_max;
  out.done = out.failed || out.timeout;
  done_ = out.done;
  if (!blew_up) {
    out.reward = reward(state_, action / cfg_.reward_action_scale, zeta, out.tracking_error,
                        cfg_.reward, sim_);
    out.slip_ratio = slip_ratio(state_, sim_);
    out.mode = state_.mode;
    out.obs = observe();
  }
  return out;
}

}  // namespace wiplab
