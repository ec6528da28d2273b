#pragma once

// Episode-level environment around the simulator: observation assembly,
// shaped reward, curriculum gate, quintic commands and termination. One
// decision step holds the wheel command for `decimation` physics steps.

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "wiplab/dynamics.hpp"
#include "wiplab/rng.hpp"

namespace wiplab {

inline constexpr int kObsDim = 10;
inline constexpr int kProprioDim = 9;  // observation without the friction slot

enum class ObsMode { Training, Deployment };

struct Observation {
  double x_w = 0.0;       // wheel angle, rad
  double x_w_dot = 0.0;   // rad/s
  double beta = 0.0;      // rad
  double beta_dot = 0.0;  // rad/s
  double x_tr = 0.0;      // translation, m
  double x_tr_dot = 0.0;  // m/s
  double a_prev = 0.0;    // previous wheel command, rad/s
  double c_pos = 0.0;     // m
  double c_vel = 0.0;     // m/s
  double mu_hat = 0.0;    // friction slot

  std::array<double, kObsDim> as_array() const {
    return {x_w, x_w_dot, beta, beta_dot, x_tr, x_tr_dot, a_prev,
            c_pos, c_vel, mu_hat};
  }
  bool operator==(const Observation&) const = default;
};

// Rest-to-rest quintic from 0 to `target` over `duration` seconds.
struct Command {
  std::array<double, 6> coeffs{};  // position polynomial, ascending powers
  double duration = 4.0;
  double target = 0.0;

  static Command rest_to_rest(double target, double duration);
};

struct CommandSample {
  double position = 0.0;
  double velocity = 0.0;
};

// Beyond the duration the command holds (target, 0).
CommandSample quintic_sample(const Command& cmd, double t);

struct CurriculumState {
  double mean_episode_length = 0.0;  // decision steps
  double t_max = 1000.0;
};

// (tanh(8 T/T_max - 3) + 1) / 2
double curriculum_gate(const CurriculumState& cs);

struct RewardConfig {
  double output_penalty_low = 0.01;   // A_l
  double output_penalty_high = 0.1;   // A_h
  double slip_weight = 3.0;
  double velocity_penalty = 0.01;
  double pitch_rate_penalty = 0.005;
  double tracking_weight = 0.3;
  double tracking_offset = 0.01;
  // false swaps a^2 in the tracking term for tracking_action^2, which keeps
  // the bonus a function of the error alone; the literal form pays for wheel
  // chatter near the command.
  bool tracking_uses_action = false;
  double tracking_action = 0.2;
};

// Five-term shaped reward. `action` is the scalar wheel action in the units
// the caller chooses (the environment passes the command normalized by
// v_max); `tracking_error` is |p - c_pos| in metres.
double reward(const WipState& s, double action, double zeta,
              double tracking_error, const RewardConfig& cfg,
              const WipParams& params);

struct EnvConfig {
  WipParams sim;
  RewardConfig reward;
  int t_max = 1000;  // decision steps
  int decimation = 8;
  double beta_fail = 0.6;
  double command_duration = 4.0;
  double target_range = 0.3;
  double mu_max = 2.0;
  double v_max = 20.0;
  double init_beta = 0.05;  // initial pitch drawn from U(-init_beta, init_beta)
  double reward_action_scale = 20.0;  // the reward sees action / this

  double decision_dt() const { return decimation * sim.dt; }
};

Observation observe(const WipState& s, double a_prev, CommandSample cmd,
                    double mu_hat, ObsMode mode, const EnvConfig& cfg);

double randomize_friction(Rng& rng, double lo, double hi);

struct EpisodeSetup {
  double mu = 1.0;      // true contact friction
  double mu_hat = 1.0;  // value placed in the observation's friction slot
  Command command;
  WipState initial;
};

// Samples a command target and initial pitch; friction fields are left to
// the caller.
EpisodeSetup sample_episode(const EnvConfig& cfg, Rng& command_rng);

struct StepOutcome {
  Observation obs;
  double reward = 0.0;
  bool done = false;
  bool failed = false;  // |beta| > beta_fail or non-finite state
  bool timeout = false;
  double slip_ratio = 0.0;
  ContactMode mode = ContactMode::Stick;
  double slip_distance = 0.0;  // integral of |p_dot - r phi_dot| this step, m
  double tracking_error = 0.0;
  double time = 0.0;  // s since reset
};

class WipEnv {
 public:
  explicit WipEnv(EnvConfig cfg, ObsMode mode = ObsMode::Training);

  void reset(const EpisodeSetup& setup);
  // Throws EpisodeFinished when called after done.
  StepOutcome step(double action, double zeta);

  Observation observe() const;
  Observation observe(ObsMode mode) const;

  const WipState& state() const { return state_; }
  const EpisodeSetup& setup() const { return setup_; }
  const EnvConfig& config() const { return cfg_; }
  int steps() const { return steps_; }
  bool done() const { return done_; }
  double time() const { return steps_ * cfg_.decision_dt(); }
  CommandSample command_now() const;
  std::uint64_t physics_steps() const { return physics_steps_; }
  void set_obs_mode(ObsMode mode) { mode_ = mode; }

 private:
  EnvConfig cfg_;
  WipParams sim_;
  ObsMode mode_;
  EpisodeSetup setup_;
  WipState state_;
  double a_prev_ = 0.0;
  int steps_ = 0;
  bool done_ = true;
  std::uint64_t physics_steps_ = 0;
};

}  // namespace wiplab
