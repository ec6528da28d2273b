#include "wiplab/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <thread>

#include "wiplab/errors.hpp"

namespace wiplab {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // ln(2 pi)
constexpr int kMuSlot = 9;

// Mean/variance of a scalar stream (parallel Welford merge per batch).
struct RunningMeanStd {
  double mean = 0.0;
  double var = 1.0;
  double count = 1e-4;

  void update(std::span<const double> xs) {
    if (xs.empty()) return;
    double bm = 0.0;
    for (double x : xs) bm += x;
    bm /= static_cast<double>(xs.size());
    double bv = 0.0;
    for (double x : xs) bv += (x - bm) * (x - bm);
    bv /= static_cast<double>(xs.size());
    const double bc = static_cast<double>(xs.size());
    const double delta = bm - mean;
    const double tot = count + bc;
    mean += delta * bc / tot;
    const double m2 = var * count + bv * bc + delta * delta * count * bc / tot;
    var = m2 / tot;
    count = tot;
  }
};

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  return idx;
}

bool uses_estimate(Variant v) {
  return v == Variant::Ours || v == Variant::XtrAblation;
}

bool uses_latent(Variant v) {
  return v == Variant::Teacher || v == Variant::Student;
}

// Unscaled per-variant input with the friction slot left raw: the estimate,
// zero, or (teacher/student) the true friction / latent supplied later.
std::array<double, kObsDim> raw_input(const Policy& pol, const Observation& o,
                                      double mu_true) {
  std::array<double, kObsDim> x = o.as_array();
  for (int i = 0; i < kMuSlot; ++i) x[i] *= pol.obs_scale[i];
  if (pol.variant == Variant::XtrAblation) {
    x[4] = 0.0;
    x[5] = 0.0;
  }
  switch (pol.variant) {
    case Variant::Ours:
    case Variant::XtrAblation:
      x[kMuSlot] = o.mu_hat * pol.obs_scale[kMuSlot];
      break;
    case Variant::Ppo:
    case Variant::PpoDr:
      x[kMuSlot] = 0.0;
      break;
    case Variant::Teacher:
    case Variant::Student:
      x[kMuSlot] = mu_true;
      break;
  }
  return x;
}

// Replaces the raw friction column by the encoder latent for the teacher.
struct Resolved {
  nn::Matrix inputs;
  std::optional<nn::Tape> encoder_tape;
};

Resolved resolve(const Policy& pol, const nn::Matrix& raw) {
  Resolved r{raw, std::nullopt};
  if (pol.variant == Variant::Teacher) {
    r.encoder_tape = pol.encoder->forward_tape(raw.col(kMuSlot));
    r.inputs.col(kMuSlot) = r.encoder_tape->output.col(0);
  }
  return r;
}

double gaussian_log_prob(double u, double mean, double log_std) {
  const double z = (u - mean) * std::exp(-log_std);
  return -0.5 * z * z - log_std - 0.5 * kLog2Pi;
}

std::vector<nn::ParamTensor*> trainable(Policy& pol) {
  std::vector<nn::ParamTensor*> t;
  for (auto& p : pol.actor.params()) t.push_back(&p);
  for (auto& p : pol.critic.params()) t.push_back(&p);
  t.push_back(&pol.log_std);
  if (pol.variant == Variant::Teacher) {
    for (auto& p : pol.encoder->params()) t.push_back(&p);
  }
  return t;
}

template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  const int w = std::min(workers, n);
  for (int k = 0; k < w; ++k) {
    pool.emplace_back([&, k] {
      for (int i = k; i < n; i += w) fn(i);
    });
  }
}

EpisodeSetup sample_training_episode(const TrainSpec& s, Rng& command_rng,
                                     Rng& friction_rng, Rng& noise_rng) {
  EpisodeSetup e = sample_episode(s.env, command_rng);
  e.mu = s.variant == Variant::Ppo
             ? s.fixed_mu
             : randomize_friction(friction_rng, s.mu_lo, s.mu_hi);
  e.mu_hat = uses_estimate(s.variant)
                 ? noisify_mu(e.mu, s.noise, noise_rng, s.env.mu_max)
                 : (uses_latent(s.variant) ? e.mu : 0.0);
  return e;
}

nlohmann::json policy_metadata(const Policy& p) {
  return {{"variant", to_string(p.variant)},
          {"obs_scale", p.obs_scale},
          {"v_max", p.v_max},
          {"history", p.history}};
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Ours: return "ours";
    case Variant::Ppo: return "ppo";
    case Variant::PpoDr: return "ppo+dr";
    case Variant::Teacher: return "teacher";
    case Variant::Student: return "student";
    case Variant::XtrAblation: return "xtr-ablation";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "ours") return Variant::Ours;
  if (s == "ppo") return Variant::Ppo;
  if (s == "ppo+dr" || s == "ppo_dr" || s == "ppo-dr") return Variant::PpoDr;
  if (s == "teacher") return Variant::Teacher;
  if (s == "student") return Variant::Student;
  if (s == "xtr" || s == "xtr-ablation" || s == "x_tr-ablation") {
    return Variant::XtrAblation;
  }
  throw ConfigInvalid("unknown variant '" + s + "'");
}

double noisify_mu(double mu_true, const NoiseModel& nm, Rng& rng,
                  double mu_max) {
  double mu;
  if (uniform01(rng) < nm.p_outlier) {
    mu = mu_true + uniform(rng, -nm.outlier_half_width, nm.outlier_half_width);
  } else {
    mu = mu_true + nm.sigma * standard_normal(rng);
  }
  return std::clamp(mu, 0.0, mu_max);
}

GaeResult gae(std::span<const double> rewards, std::span<const double> values,
              std::span<const std::uint8_t> dones, double bootstrap,
              double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) {
    throw LengthMismatch("gae: rewards, values and dones must align");
  }
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_value = bootstrap;
  double running = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double not_done = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * next_value * not_done - values[i];
    running = delta + gamma * lambda * not_done * running;
    out.advantages[i] = running;
    out.returns[i] = running + values[i];
    next_value = values[i];
  }
  return out;
}

void normalize_advantages(std::span<double> adv) {
  if (adv.empty()) return;
  double mean = 0.0;
  for (double a : adv) mean += a;
  mean /= static_cast<double>(adv.size());
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  var /= static_cast<double>(adv.size());
  const double inv = 1.0 / (std::sqrt(var) + 1e-12);
  for (double& a : adv) a = (a - mean) * inv;
}

void PpoConfig::validate() const {
  if (!(gamma > 0 && gamma <= 1) || !(lambda > 0 && lambda <= 1)) {
    throw ConfigInvalid("ppo.gamma and ppo.lambda must lie in (0, 1]");
  }
  if (!(clip > 0)) throw ConfigInvalid("ppo.clip must be positive");
  if (epochs < 1 || minibatches < 1 || horizon < 1 || num_envs < 1 ||
      iterations < 0 || workers < 1) {
    throw ConfigInvalid("ppo counts must be positive");
  }
  if (horizon * num_envs < minibatches) {
    throw ConfigInvalid("ppo batch smaller than the minibatch count");
  }
}

std::array<double, kObsDim> default_obs_scale() {
  // x_w, x_w_dot, beta, beta_dot, x_tr, x_tr_dot, a_prev, c_pos, c_vel, mu
  return {0.3, 0.05, 2.0, 0.5, 3.0, 1.0, 0.05, 3.0, 5.0, 1.0};
}

Policy Policy::create(Variant v, Rng& rng, double init_log_std) {
  Policy p;
  p.variant = v;
  p.actor = nn::Network(nn::actor_spec());
  p.actor.init_orthogonal(rng, 0.01);
  p.critic = nn::Network(nn::critic_spec());
  p.critic.init_orthogonal(rng, 1.0);
  p.log_std.value[0] = init_log_std;
  if (uses_latent(v)) {
    p.encoder = nn::Network(nn::encoder_spec());
    p.encoder->init_orthogonal(rng, 1.0);
  }
  if (v == Variant::Student) {
    p.adaptation = nn::Network(nn::adaptation_spec(kProprioDim, p.history));
    p.adaptation->init_orthogonal(rng, 1.0);
  }
  return p;
}

std::array<double, kObsDim> Policy::input(const Observation& o, double mu_true,
                                          double latent) const {
  auto x = raw_input(*this, o, mu_true);
  if (variant == Variant::Teacher) x[kMuSlot] = latent_from_mu(mu_true);
  if (variant == Variant::Student) x[kMuSlot] = latent;
  return x;
}

std::array<double, kProprioDim> Policy::proprio(const Observation& o) const {
  const auto a = o.as_array();
  std::array<double, kProprioDim> x{};
  for (int i = 0; i < kProprioDim; ++i) x[i] = a[i] * obs_scale[i];
  return x;
}

double Policy::mean_action(std::span<const double> in) const {
  return std::tanh(actor.forward(in)(0));
}

double Policy::latent_from_mu(double mu) const {
  if (!encoder) throw MissingTeacher("policy has no friction encoder");
  const double x[1] = {mu};
  return encoder->forward(std::span<const double>(x, 1))(0);
}

double Policy::latent_from_history(std::span<const double> flat) const {
  if (!adaptation) throw MissingTeacher("policy has no adaptation module");
  return adaptation->forward(flat)(0);
}

nn::Checkpoint Policy::to_checkpoint(const nlohmann::json& metadata) const {
  nn::Checkpoint ck;
  ck.metadata = metadata.is_object() ? metadata : nlohmann::json::object();
  ck.metadata["policy"] = policy_metadata(*this);
  ck.put_network("actor", actor);
  ck.put_network("critic", critic);
  if (encoder) ck.put_network("encoder", *encoder);
  if (adaptation) ck.put_network("adaptation", *adaptation);
  ck.blobs["log_std"] = log_std.value;
  return ck;
}

Policy Policy::from_checkpoint(const nn::Checkpoint& ck) {
  Policy p;
  try {
    const auto& meta = ck.metadata.at("policy");
    p.variant = variant_from_string(meta.at("variant").get<std::string>());
    p.obs_scale = meta.at("obs_scale").get<std::array<double, kObsDim>>();
    p.v_max = meta.at("v_max").get<double>();
    p.history = meta.at("history").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointLoad(std::string("checkpoint policy metadata: ") + e.what());
  } catch (const ConfigInvalid& e) {
    throw CheckpointLoad(e.what());
  }
  p.actor = ck.network("actor");
  p.critic = ck.network("critic");
  if (ck.has_network("encoder")) p.encoder = ck.network("encoder");
  if (ck.has_network("adaptation")) p.adaptation = ck.network("adaptation");
  const auto& ls = ck.blob("log_std");
  if (ls.size() != 1) throw CheckpointLoad("log_std blob must hold 1 value");
  p.log_std.value = ls;
  if (uses_latent(p.variant) && !p.encoder) {
    throw CheckpointLoad("latent-conditioned policy without encoder");
  }
  if (p.variant == Variant::Student && !p.adaptation) {
    throw CheckpointLoad("student policy without adaptation module");
  }
  return p;
}

void ProprioHistory::push(const std::array<double, kProprioDim>& v) {
  entries_.push_back(v);
  while (static_cast<int>(entries_.size()) > length_) entries_.pop_front();
}

std::vector<double> ProprioHistory::flat() const {
  std::vector<double> out(static_cast<std::size_t>(kProprioDim) * length_, 0.0);
  const int pad = length_ - static_cast<int>(entries_.size());
  for (std::size_t k = 0; k < entries_.size(); ++k) {
    const int pos = pad + static_cast<int>(k);
    for (int c = 0; c < kProprioDim; ++c) {
      out[static_cast<std::size_t>(c) * length_ + pos] = entries_[k][c];
    }
  }
  return out;
}

void RolloutBuffer::allocate(int envs, int steps) {
  num_envs = envs;
  horizon = steps;
  const std::size_t n = static_cast<std::size_t>(envs) * steps;
  inputs = nn::Matrix::Zero(static_cast<Eigen::Index>(n), kObsDim);
  actions.assign(n, 0.0);
  log_probs.assign(n, 0.0);
  rewards.assign(n, 0.0);
  values.assign(n, 0.0);
  dones.assign(n, 0);
  advantages.assign(n, 0.0);
  returns.assign(n, 0.0);
  bootstrap.assign(envs, 0.0);
}

void RolloutBuffer::compute_advantages(double gamma, double lambda) {
  std::vector<double> r(horizon), v(horizon);
  std::vector<std::uint8_t> d(horizon);
  for (int e = 0; e < num_envs; ++e) {
    for (int t = 0; t < horizon; ++t) {
      const std::size_t i = static_cast<std::size_t>(t) * num_envs + e;
      r[t] = rewards[i];
      v[t] = values[i];
      d[t] = dones[i];
    }
    const GaeResult g = gae(r, v, d, bootstrap[e], gamma, lambda);
    for (int t = 0; t < horizon; ++t) {
      const std::size_t i = static_cast<std::size_t>(t) * num_envs + e;
      advantages[i] = g.advantages[t];
      returns[i] = g.returns[t];
    }
  }
  normalize_advantages(advantages);
}

UpdateStats ppo_update(Policy& pol, const RolloutBuffer& buf,
                       const PpoConfig& cfg, nn::Adam& opt, Rng& rng) {
  const std::size_t n = buf.size();
  const std::size_t mb = n / static_cast<std::size_t>(cfg.minibatches);
  auto tensors = trainable(pol);
  UpdateStats st;
  int count = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = permutation(n, rng);
    for (int b = 0; b < cfg.minibatches; ++b) {
      const auto rows = static_cast<Eigen::Index>(mb);
      nn::Matrix raw(rows, kObsDim);
      for (Eigen::Index k = 0; k < rows; ++k) {
        raw.row(k) = buf.inputs.row(static_cast<Eigen::Index>(perm[b * mb + k]));
      }
      Resolved in = resolve(pol, raw);
      const nn::Tape actor_tape = pol.actor.forward_tape(in.inputs);
      const nn::Tape critic_tape = pol.critic.forward_tape(in.inputs);

      const double log_std = pol.log_std.value[0];
      const double inv_std = std::exp(-log_std);
      nn::Matrix d_actor(rows, 1), d_critic(rows, 1);
      double d_log_std = 0.0;
      double pl = 0.0, vl = 0.0, kl = 0.0, clipped = 0.0;
      const double inv_b = 1.0 / static_cast<double>(rows);
      for (Eigen::Index k = 0; k < rows; ++k) {
        const std::size_t i = perm[b * mb + k];
        const double adv = buf.advantages[i];
        const double mean = std::tanh(actor_tape.output(k, 0));
        const double logp = gaussian_log_prob(buf.actions[i], mean, log_std);
        const double log_ratio = logp - buf.log_probs[i];
        const double ratio = std::exp(log_ratio);
        const double unclipped = ratio * adv;
        const double clipped_ratio = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
        pl += -std::min(unclipped, clipped_ratio * adv);
        kl += (ratio - 1.0) - log_ratio;
        const bool is_clipped = (adv >= 0 && ratio > 1.0 + cfg.clip) ||
                                (adv < 0 && ratio < 1.0 - cfg.clip);
        clipped += is_clipped ? 1.0 : 0.0;
        // d(loss)/d(logp)
        const double g_logp = is_clipped ? 0.0 : -adv * ratio * inv_b;
        const double z = (buf.actions[i] - mean) * inv_std;
        d_actor(k, 0) = g_logp * (z * inv_std) * (1.0 - mean * mean);
        d_log_std += g_logp * (z * z - 1.0);

        const double v = critic_tape.output(k, 0);
        const double err = v - buf.returns[i];
        vl += 0.5 * err * err;
        d_critic(k, 0) = cfg.value_coef * err * inv_b;
      }
      d_log_std -= cfg.entropy_coef;
      pl *= inv_b;
      vl *= inv_b;
      const double entropy = 0.5 + 0.5 * kLog2Pi + log_std;
      if (!std::isfinite(pl) || !std::isfinite(vl)) {
        throw NonFiniteLoss("non-finite PPO loss");
      }

      for (auto* t : tensors) t->zero_grad();
      const nn::Matrix g_in_actor = pol.actor.backward(actor_tape, d_actor);
      const nn::Matrix g_in_critic = pol.critic.backward(critic_tape, d_critic);
      pol.log_std.grad[0] = d_log_std;
      if (in.encoder_tape) {
        nn::Matrix dz = g_in_actor.col(kMuSlot) + g_in_critic.col(kMuSlot);
        pol.encoder->backward(*in.encoder_tape, dz);
      }

      double norm2 = 0.0;
      for (auto* t : tensors)
        for (double g : t->grad) norm2 += g * g;
      if (!std::isfinite(norm2)) throw NonFiniteLoss("non-finite PPO gradient");
      const double norm = std::sqrt(norm2);
      if (cfg.max_grad_norm > 0 && norm > cfg.max_grad_norm) {
        const double s = cfg.max_grad_norm / norm;
        for (auto* t : tensors)
          for (double& g : t->grad) g *= s;
      }
      opt.step(tensors);

      st.policy_loss += pl;
      st.value_loss += vl;
      st.entropy += entropy;
      st.approx_kl += kl * inv_b;
      st.clip_fraction += clipped * inv_b;
      ++count;
    }
  }
  if (count > 0) {
    st.policy_loss /= count;
    st.value_loss /= count;
    st.entropy /= count;
    st.approx_kl /= count;
    st.clip_fraction /= count;
  }
  return st;
}

std::string metrics_csv_header() {
  return "iteration,mean_reward,mean_episode_length,completed_episodes,zeta,"
         "policy_loss,value_loss,entropy,approx_kl,clip_fraction,log_std";
}

std::string metrics_csv_row(const IterationMetrics& m) {
  std::ostringstream os;
  os.precision(17);
  os << m.iteration << ',' << m.mean_reward << ',' << m.mean_episode_length
     << ',' << m.completed_episodes << ',' << m.zeta << ','
     << m.stats.policy_loss << ',' << m.stats.value_loss << ','
     << m.stats.entropy << ',' << m.stats.approx_kl << ','
     << m.stats.clip_fraction << ',' << m.log_std;
  return os.str();
}

TrainResult train(const TrainSpec& spec, const nlohmann::json& config_snapshot,
                  const MetricsSink& sink) {
  spec.ppo.validate();
  spec.env.sim.validate();
  if (spec.variant == Variant::Student) {
    throw ConfigInvalid("the student is produced by distillation, not PPO");
  }
  if (!(spec.mu_lo >= 0 && spec.mu_lo <= spec.mu_hi)) {
    throw ConfigInvalid("training friction range must satisfy 0 <= lo <= hi");
  }
  const PpoConfig& cfg = spec.ppo;
  const int n_env = cfg.num_envs;

  Rng init_rng = make_rng(spec.seed, "init");
  Policy pol = Policy::create(spec.variant, init_rng, cfg.init_log_std);
  nn::Adam opt(nn::AdamConfig{cfg.lr});
  Rng action_rng = make_rng(spec.seed, "action");
  Rng batch_rng = make_rng(spec.seed, "minibatch");

  std::vector<WipEnv> envs;
  std::vector<Rng> cmd_rngs, fric_rngs, noise_rngs;
  std::vector<Observation> obs(n_env);
  std::vector<double> ret_acc(n_env, 0.0);
  for (int e = 0; e < n_env; ++e) {
    envs.emplace_back(spec.env, ObsMode::Training);
    cmd_rngs.push_back(make_rng(spec.seed, "command", e));
    fric_rngs.push_back(make_rng(spec.seed, "friction", e));
    noise_rngs.push_back(make_rng(spec.seed, "noise", e));
    envs[e].reset(sample_training_episode(spec, cmd_rngs[e], fric_rngs[e],
                                          noise_rngs[e]));
    obs[e] = envs[e].observe();
  }

  RunningMeanStd ret_rms;
  CurriculumState curriculum{0.0, static_cast<double>(spec.env.t_max)};
  RolloutBuffer buf;
  TrainResult result;

  for (int it = 0; it < cfg.iterations; ++it) {
    const double zeta = spec.curriculum ? curriculum_gate(curriculum) : 1.0;
    buf.allocate(n_env, cfg.horizon);
    double reward_sum = 0.0;
    double length_sum = 0.0;
    int completed = 0;
    std::vector<StepOutcome> outs(n_env);
    std::vector<double> actions(n_env);

    for (int t = 0; t < cfg.horizon; ++t) {
      nn::Matrix raw(n_env, kObsDim);
      for (int e = 0; e < n_env; ++e) {
        const auto x = raw_input(pol, obs[e], envs[e].setup().mu);
        for (int c = 0; c < kObsDim; ++c) raw(e, c) = x[c];
      }
      const Resolved in = resolve(pol, raw);
      const nn::Matrix out = pol.actor.forward(in.inputs);
      const nn::Matrix val = pol.critic.forward(in.inputs);
      const double log_std = pol.log_std.value[0];
      const double std_dev = std::exp(log_std);
      for (int e = 0; e < n_env; ++e) {
        const std::size_t i = static_cast<std::size_t>(t) * n_env + e;
        const double mean = std::tanh(out(e, 0));
        const double u = mean + std_dev * standard_normal(action_rng);
        buf.inputs.row(static_cast<Eigen::Index>(i)) = raw.row(e);
        buf.actions[i] = u;
        buf.log_probs[i] = gaussian_log_prob(u, mean, log_std);
        buf.values[i] = val(e, 0);
        actions[e] = pol.v_max * std::clamp(u, -1.0, 1.0);
      }

      parallel_for(n_env, cfg.workers, [&](int e) {
        outs[e] = envs[e].step(actions[e], zeta);
      });

      std::vector<double> raw_rewards(n_env);
      for (int e = 0; e < n_env; ++e) {
        raw_rewards[e] = outs[e].reward;
        reward_sum += outs[e].reward;
        ret_acc[e] = ret_acc[e] * cfg.gamma + outs[e].reward;
      }
      double scale = 1.0;
      if (cfg.normalize_rewards) {
        ret_rms.update(ret_acc);
        scale = 1.0 / std::sqrt(ret_rms.var + 1e-8);
      }

      // Time-limit truncation: bootstrap from the final observation.
      std::vector<int> truncated;
      for (int e = 0; e < n_env; ++e) {
        if (outs[e].timeout) truncated.push_back(e);
      }
      std::vector<double> final_values(n_env, 0.0);
      if (!truncated.empty()) {
        nn::Matrix fin(static_cast<Eigen::Index>(truncated.size()), kObsDim);
        for (std::size_t k = 0; k < truncated.size(); ++k) {
          const int e = truncated[k];
          const auto x = raw_input(pol, outs[e].obs, envs[e].setup().mu);
          for (int c = 0; c < kObsDim; ++c) fin(k, c) = x[c];
        }
        const nn::Matrix fv = pol.critic.forward(resolve(pol, fin).inputs);
        for (std::size_t k = 0; k < truncated.size(); ++k) {
          final_values[truncated[k]] = fv(k, 0);
        }
      }

      for (int e = 0; e < n_env; ++e) {
        const std::size_t i = static_cast<std::size_t>(t) * n_env + e;
        double r = raw_rewards[e] * scale;
        if (outs[e].timeout) r += cfg.gamma * final_values[e];
        buf.rewards[i] = r;
        buf.dones[i] = outs[e].done ? 1 : 0;
        if (outs[e].done) {
          length_sum += envs[e].steps();
          ++completed;
          ret_acc[e] = 0.0;
          envs[e].reset(sample_training_episode(spec, cmd_rngs[e], fric_rngs[e],
                                                noise_rngs[e]));
          obs[e] = envs[e].observe();
        } else {
          obs[e] = outs[e].obs;
        }
      }
    }

    {
      nn::Matrix raw(n_env, kObsDim);
      for (int e = 0; e < n_env; ++e) {
        const auto x = raw_input(pol, obs[e], envs[e].setup().mu);
        for (int c = 0; c < kObsDim; ++c) raw(e, c) = x[c];
      }
      const nn::Matrix val = pol.critic.forward(resolve(pol, raw).inputs);
      for (int e = 0; e < n_env; ++e) buf.bootstrap[e] = val(e, 0);
    }
    buf.compute_advantages(cfg.gamma, cfg.lambda);

    IterationMetrics m;
    m.iteration = it;
    m.zeta = zeta;
    m.completed_episodes = completed;
    if (completed > 0) curriculum.mean_episode_length = length_sum / completed;
    m.mean_episode_length = curriculum.mean_episode_length;
    m.mean_reward = reward_sum / (static_cast<double>(n_env) * cfg.horizon);
    try {
      m.stats = ppo_update(pol, buf, cfg, opt, batch_rng);
    } catch (const NonFiniteLoss& e) {
      result.aborted = std::string(e.what()) + " at iteration " + std::to_string(it);
      break;
    }
    m.log_std = pol.log_std.value[0];
    result.metrics.push_back(m);
    if (sink) sink(m);
  }

  nlohmann::json meta = nlohmann::json::object();
  meta["config"] = config_snapshot;
  meta["seed"] = spec.seed;
  meta["iterations"] = static_cast<int>(result.metrics.size());
  if (!result.aborted.empty()) meta["aborted"] = result.aborted;
  meta["curriculum"] = {{"mean_episode_length", curriculum.mean_episode_length},
                        {"t_max", curriculum.t_max}};
  meta["return_rms"] = {{"mean", ret_rms.mean}, {"var", ret_rms.var},
                        {"count", ret_rms.count}};
  meta["optimizer"] = {{"steps", opt.steps()}, {"lr", cfg.lr}};
  result.checkpoint = pol.to_checkpoint(meta);
  result.checkpoint.blobs["opt/m"] = opt.flat_m();
  result.checkpoint.blobs["opt/v"] = opt.flat_v();
  result.policy = std::move(pol);
  return result;
}

namespace {

// Collects rollouts driven by the teacher (encoder latent from the true
// friction): rows of flattened histories and the latent targets.
struct DistillBatch {
  nn::Matrix histories;
  std::vector<double> targets;
};

class TeacherRollout {
 public:
  TeacherRollout(const Policy& pol, const TrainSpec& spec, int num_envs,
                 double mu_lo, double mu_hi, std::uint64_t seed)
      : pol_(pol), spec_(spec), mu_lo_(mu_lo), mu_hi_(mu_hi) {
    for (int e = 0; e < num_envs; ++e) {
      envs_.emplace_back(spec.env, ObsMode::Deployment);
      cmd_.push_back(make_rng(seed, "distill-command", e));
      fric_.push_back(make_rng(seed, "distill-friction", e));
      hist_.emplace_back(pol.history);
      reset(e);
    }
  }

  DistillBatch collect(int steps) {
    const int n = static_cast<int>(envs_.size());
    const int width = kProprioDim * pol_.history;
    DistillBatch batch;
    batch.histories.resize(static_cast<Eigen::Index>(n) * steps, width);
    batch.targets.resize(static_cast<std::size_t>(n) * steps);
    for (int t = 0; t < steps; ++t) {
      nn::Matrix h(n, width);
      for (int e = 0; e < n; ++e) {
        hist_[e].push(pol_.proprio(obs_[e]));
        const auto flat = hist_[e].flat();
        for (int c = 0; c < width; ++c) h(e, c) = flat[c];
      }
      for (int e = 0; e < n; ++e) {
        const std::size_t i = static_cast<std::size_t>(t) * n + e;
        batch.histories.row(static_cast<Eigen::Index>(i)) = h.row(e);
        batch.targets[i] = pol_.latent_from_mu(envs_[e].setup().mu);
        const auto x = pol_.input(obs_[e], envs_[e].setup().mu, batch.targets[i]);
        const double a = pol_.v_max * pol_.mean_action(x);
        const StepOutcome out = envs_[e].step(a, 1.0);
        if (out.done) {
          reset(e);
        } else {
          obs_[e] = out.obs;
        }
      }
    }
    return batch;
  }

 private:
  void reset(int e) {
    EpisodeSetup s = sample_episode(spec_.env, cmd_[e]);
    s.mu = randomize_friction(fric_[e], mu_lo_, mu_hi_);
    s.mu_hat = s.mu;
    envs_[e].reset(s);
    hist_[e].clear();
    if (static_cast<int>(obs_.size()) <= e) obs_.resize(e + 1);
    obs_[e] = envs_[e].observe();
  }

  const Policy& pol_;
  const TrainSpec& spec_;
  double mu_lo_, mu_hi_;
  std::vector<WipEnv> envs_;
  std::vector<Rng> cmd_, fric_;
  std::vector<ProprioHistory> hist_;
  std::vector<Observation> obs_;
};

}  // namespace

DistillResult distill_student(const nn::Checkpoint& teacher_ck,
                              const TrainSpec& spec,
                              const nlohmann::json& config_snapshot) {
  if (!teacher_ck.has_network("encoder")) {
    throw MissingTeacher("teacher checkpoint has no friction encoder");
  }
  Policy pol = Policy::from_checkpoint(teacher_ck);
  pol.variant = Variant::Student;
  pol.history = spec.distill.history;
  Rng init_rng = make_rng(spec.seed, "adaptation-init");
  pol.adaptation = nn::Network(nn::adaptation_spec(kProprioDim, pol.history));
  pol.adaptation->init_orthogonal(init_rng, 1.0);

  const DistillConfig& dc = spec.distill;
  nn::Adam opt(nn::AdamConfig{dc.lr});
  Rng batch_rng = make_rng(spec.seed, "distill-minibatch");
  TeacherRollout rollout(pol, spec, dc.num_envs, spec.mu_lo, spec.mu_hi,
                         spec.seed);
  std::vector<nn::ParamTensor*> tensors;
  for (auto& p : pol.adaptation->params()) tensors.push_back(&p);

  DistillResult result;
  for (int it = 0; it < dc.iterations; ++it) {
    const DistillBatch batch = rollout.collect(dc.horizon);
    const std::size_t n = batch.targets.size();
    const std::size_t mb = std::max<std::size_t>(1, n / dc.minibatches);
    double mse_sum = 0.0;
    int mse_count = 0;
    for (int ep = 0; ep < dc.epochs; ++ep) {
      const auto perm = permutation(n, batch_rng);
      for (std::size_t start = 0; start + mb <= n; start += mb) {
        const auto rows = static_cast<Eigen::Index>(mb);
        nn::Matrix x(rows, batch.histories.cols());
        for (Eigen::Index k = 0; k < rows; ++k) {
          x.row(k) = batch.histories.row(static_cast<Eigen::Index>(perm[start + k]));
        }
        const nn::Tape tape = pol.adaptation->forward_tape(x);
        nn::Matrix g(rows, 1);
        double mse = 0.0;
        for (Eigen::Index k = 0; k < rows; ++k) {
          const double err = tape.output(k, 0) - batch.targets[perm[start + k]];
          mse += err * err;
          g(k, 0) = 2.0 * err / static_cast<double>(rows);
        }
        mse /= static_cast<double>(rows);
        if (!std::isfinite(mse)) throw NonFiniteLoss("non-finite distillation loss");
        pol.adaptation->zero_grad();
        pol.adaptation->backward(tape, g);
        opt.step(tensors);
        mse_sum += mse;
        ++mse_count;
      }
    }
    result.metrics.push_back({it, mse_count ? mse_sum / mse_count : 0.0});
  }

  nlohmann::json meta = nlohmann::json::object();
  meta["config"] = config_snapshot;
  meta["seed"] = spec.seed;
  meta["distill_iterations"] = dc.iterations;
  meta["teacher_spec_hash"] = teacher_ck.spec_hash();
  result.checkpoint = pol.to_checkpoint(meta);
  result.policy = std::move(pol);
  return result;
}

double adaptation_mse(const Policy& student, const TrainSpec& spec,
                      double mu_lo, double mu_hi, int episodes, int steps,
                      std::uint64_t seed) {
  TeacherRollout rollout(student, spec, episodes, mu_lo, mu_hi, seed);
  const DistillBatch batch = rollout.collect(steps);
  const nn::Matrix z = student.adaptation->forward(batch.histories);
  double mse = 0.0;
  for (std::size_t i = 0; i < batch.targets.size(); ++i) {
    const double err = z(static_cast<Eigen::Index>(i), 0) - batch.targets[i];
    mse += err * err;
  }
  return batch.targets.empty() ? 0.0 : mse / batch.targets.size();
}

}  // namespace wiplab
