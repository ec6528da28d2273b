#pragma once

// PPO with generalized advantage estimation for the WIP tracking task, the
// friction-estimate noise model, and the two-phase teacher/student pipeline.

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wiplab/env.hpp"
#include "wiplab/nn.hpp"
#include "wiplab/rng.hpp"

namespace wiplab {

enum class Variant { Ours, Ppo, PpoDr, Teacher, Student, XtrAblation };

std::string to_string(Variant v);
// Accepts ours, ppo, ppo+dr (or ppo_dr), teacher, student, xtr (or
// x_tr-ablation). Throws ConfigInvalid otherwise.
Variant variant_from_string(const std::string& s);

struct NoiseModel {
  double sigma = 0.1;
  double p_outlier = 0.05;
  double outlier_half_width = 0.3;
};

// Gross error with probability p_outlier, Gaussian error otherwise; the
// result is clamped to [0, mu_max].
double noisify_mu(double mu_true, const NoiseModel& nm, Rng& rng,
                  double mu_max);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Reverse recursion over one trajectory segment. dones[t] = true means the
// episode ended after step t (no bootstrapping across it); `bootstrap` is
// V(s_T) for a segment that was cut by the horizon.
GaeResult gae(std::span<const double> rewards, std::span<const double> values,
              std::span<const std::uint8_t> dones, double bootstrap,
              double gamma, double lambda);

// In-place zero-mean, unit-std normalization.
void normalize_advantages(std::span<double> adv);

struct PpoConfig {
  double lr = 3e-4;
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  int epochs = 4;
  int minibatches = 4;
  double entropy_coef = 0.003;
  double value_coef = 0.5;
  int horizon = 200;
  int num_envs = 64;
  int iterations = 300;
  double max_grad_norm = 1.0;
  double init_log_std = -0.69314718055994530942;  // ln 0.5
  bool normalize_rewards = true;
  int workers = 1;  // physics threads; results do not depend on it

  void validate() const;
};

struct DistillConfig {
  int iterations = 100;
  int horizon = 40;
  int num_envs = 64;
  int epochs = 1;
  int minibatches = 4;
  double lr = 1e-3;
  int history = 40;
};

struct TrainSpec {
  EnvConfig env;
  PpoConfig ppo;
  NoiseModel noise;
  DistillConfig distill;
  Variant variant = Variant::Ours;
  std::uint64_t seed = 1;
  double mu_lo = 0.2;  // training friction range for randomized variants
  double mu_hi = 1.5;
  double fixed_mu = 1.0;  // friction of the non-randomized PPO baseline
  bool curriculum = true;  // false pins the gate at 1
};

// Fixed per-slot input scaling applied before the networks.
std::array<double, kObsDim> default_obs_scale();

// Actor/critic bundle plus the optional friction encoder and adaptation
// module. The action head is Gaussian in normalized units around
// tanh(actor(x)); the executed wheel command is v_max * clamp(u, -1, 1).
struct Policy {
  Variant variant = Variant::Ours;
  nn::Network actor;
  nn::Network critic;
  nn::ParamTensor log_std{std::vector<int>{1}};
  std::optional<nn::Network> encoder;
  std::optional<nn::Network> adaptation;
  std::array<double, kObsDim> obs_scale = default_obs_scale();
  double v_max = 20.0;
  int history = 40;

  static Policy create(Variant v, Rng& rng, double init_log_std);

  // Scaled 10-wide network input for one observation. The friction slot is
  // filled per variant: estimate (ours, ablation), zero (ppo, ppo+dr),
  // encoder(mu_true) (teacher) or `latent` (student).
  std::array<double, kObsDim> input(const Observation& o, double mu_true,
                                    double latent = 0.0) const;
  // Scaled proprioceptive entries (first 9 slots), as used in histories.
  std::array<double, kProprioDim> proprio(const Observation& o) const;

  double mean_action(std::span<const double> input) const;  // normalized
  double latent_from_mu(double mu) const;
  double latent_from_history(std::span<const double> history_flat) const;

  nn::Checkpoint to_checkpoint(const nlohmann::json& metadata) const;
  static Policy from_checkpoint(const nn::Checkpoint& ck);
};

// Channel-major window of the last `length` proprioceptive vectors, left
// padded with zeros when fewer are available.
class ProprioHistory {
 public:
  explicit ProprioHistory(int length = 40) : length_(length) {}
  void clear() { entries_.clear(); }
  void push(const std::array<double, kProprioDim>& v);
  std::vector<double> flat() const;
  int length() const { return length_; }

 private:
  int length_;
  std::deque<std::array<double, kProprioDim>> entries_;
};

// One collected batch, flattened step-major: index = t * num_envs + env.
struct RolloutBuffer {
  int num_envs = 0;
  int horizon = 0;
  nn::Matrix inputs;  // (N, 10) scaled; teacher friction slot is raw mu
  std::vector<double> actions;  // normalized pre-clamp samples
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<std::uint8_t> dones;
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<double> bootstrap;  // per env

  void allocate(int envs, int steps);
  std::size_t size() const { return actions.size(); }
  // Fills advantages/returns per env and normalizes advantages.
  void compute_advantages(double gamma, double lambda);
};

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

// Clipped-surrogate update over `epochs` x `minibatches`. Throws
// NonFiniteLoss if any loss or gradient is not finite.
UpdateStats ppo_update(Policy& policy, const RolloutBuffer& buf,
                       const PpoConfig& cfg, nn::Adam& optimizer, Rng& rng);

struct IterationMetrics {
  int iteration = 0;
  double mean_reward = 0.0;    // per decision step, unscaled
  double mean_episode_length = 0.0;
  int completed_episodes = 0;
  double zeta = 0.0;           // gate used during this iteration's rollout
  UpdateStats stats;
  double log_std = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const IterationMetrics& m);

struct TrainResult {
  Policy policy;
  nn::Checkpoint checkpoint;
  std::vector<IterationMetrics> metrics;
  std::string aborted;  // NonFiniteLoss message; the checkpoint is a dump
};

using MetricsSink = std::function<void(const IterationMetrics&)>;

// Full loop: rollout -> curriculum update -> GAE -> ppo_update. The returned
// checkpoint carries `config_snapshot` in its metadata. A non-finite loss
// stops the loop and is reported through `aborted`.
TrainResult train(const TrainSpec& spec,
                  const nlohmann::json& config_snapshot = {},
                  const MetricsSink& sink = {});

struct DistillMetrics {
  int iteration = 0;
  double mse = 0.0;
};

struct DistillResult {
  Policy policy;
  nn::Checkpoint checkpoint;
  std::vector<DistillMetrics> metrics;
};

// Regresses the adaptation module onto the frozen encoder's latent from
// proprioceptive histories of teacher-driven rollouts. The student is the
// frozen teacher actor plus the adaptation module. Throws MissingTeacher if
// the checkpoint has no encoder.
DistillResult distill_student(const nn::Checkpoint& teacher,
                              const TrainSpec& spec,
                              const nlohmann::json& config_snapshot = {});

// Mean squared adaptation error against the encoder latent over fresh
// teacher-driven rollouts with the given friction range.
double adaptation_mse(const Policy& student, const TrainSpec& spec,
                      double mu_lo, double mu_hi, int episodes, int steps,
                      std::uint64_t seed);

}  // namespace wiplab
