#include "wiplab/config.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include "wiplab/errors.hpp"

namespace wiplab {

using nlohmann::json;

namespace {

// Visits every scalar field with its dotted key. The variant and the LQR
// weight vector are bridged through the caller-provided proxies.
template <typename Config, typename F>
void visit_fields(Config& c, std::string& variant, std::array<double, 4>& q,
                  F&& f) {
  auto& t = c.train;
  f("seed", t.seed);
  f("variant", variant);

  f("sim.wheel_mass", t.env.sim.wheel_mass);
  f("sim.pole_mass", t.env.sim.pole_mass);
  f("sim.wheel_radius", t.env.sim.wheel_radius);
  f("sim.pole_com", t.env.sim.pole_com);
  f("sim.wheel_inertia", t.env.sim.wheel_inertia);
  f("sim.pole_inertia", t.env.sim.pole_inertia);
  f("sim.gravity", t.env.sim.gravity);
  f("sim.mu", t.env.sim.mu);
  f("sim.k_d", t.env.sim.k_d);
  f("sim.tau_max", t.env.sim.tau_max);
  f("sim.dt", t.env.sim.dt);

  f("env.t_max", t.env.t_max);
  f("env.decimation", t.env.decimation);
  f("env.beta_fail", t.env.beta_fail);
  f("env.command_duration", t.env.command_duration);
  f("env.target_range", t.env.target_range);
  f("env.mu_max", t.env.mu_max);
  f("env.v_max", t.env.v_max);
  f("env.init_beta", t.env.init_beta);
  f("env.reward_action_scale", t.env.reward_action_scale);

  f("reward.output_penalty_low", t.env.reward.output_penalty_low);
  f("reward.output_penalty_high", t.env.reward.output_penalty_high);
  f("reward.slip_weight", t.env.reward.slip_weight);
  f("reward.velocity_penalty", t.env.reward.velocity_penalty);
  f("reward.pitch_rate_penalty", t.env.reward.pitch_rate_penalty);
  f("reward.tracking_weight", t.env.reward.tracking_weight);
  f("reward.tracking_offset", t.env.reward.tracking_offset);
  f("reward.tracking_uses_action", t.env.reward.tracking_uses_action);
  f("reward.tracking_action", t.env.reward.tracking_action);

  f("curriculum.enabled", t.curriculum);

  f("ppo.lr", t.ppo.lr);
  f("ppo.gamma", t.ppo.gamma);
  f("ppo.lambda", t.ppo.lambda);
  f("ppo.clip", t.ppo.clip);
  f("ppo.epochs", t.ppo.epochs);
  f("ppo.minibatches", t.ppo.minibatches);
  f("ppo.entropy_coef", t.ppo.entropy_coef);
  f("ppo.value_coef", t.ppo.value_coef);
  f("ppo.horizon", t.ppo.horizon);
  f("ppo.num_envs", t.ppo.num_envs);
  f("ppo.iterations", t.ppo.iterations);
  f("ppo.max_grad_norm", t.ppo.max_grad_norm);
  f("ppo.init_log_std", t.ppo.init_log_std);
  f("ppo.normalize_rewards", t.ppo.normalize_rewards);
  f("ppo.workers", t.ppo.workers);

  f("train.mu_lo", t.mu_lo);
  f("train.mu_hi", t.mu_hi);
  f("train.fixed_mu", t.fixed_mu);

  f("noise.sigma", t.noise.sigma);
  f("noise.p_outlier", t.noise.p_outlier);
  f("noise.outlier_half_width", t.noise.outlier_half_width);

  f("distill.iterations", t.distill.iterations);
  f("distill.horizon", t.distill.horizon);
  f("distill.num_envs", t.distill.num_envs);
  f("distill.epochs", t.distill.epochs);
  f("distill.minibatches", t.distill.minibatches);
  f("distill.lr", t.distill.lr);
  f("distill.history", t.distill.history);

  f("lqr.q_diag", q);
  f("lqr.r", c.lqr.r);

  f("ffv.cache", c.ffv.cache);
  f("ffv.k", c.ffv.k);
  f("ffv.endpoint", c.ffv.endpoint);
  f("ffv.model", c.ffv.model);
  f("ffv.timeout_s", c.ffv.timeout_s);
  f("ffv.max_retries", c.ffv.max_retries);
  f("ffv.backoff_s", c.ffv.backoff_s);
  f("ffv.mu_max", c.ffv.mu_max);

  f("eval.episodes", c.eval.episodes);
  f("eval.mu_lo", c.eval.mu_lo);
  f("eval.mu_hi", c.eval.mu_hi);
  f("eval.mu_input", c.eval.mu_input);
  f("eval.mu_input_value", c.eval.mu_input_value);
  f("eval.sweep_grid", c.eval.sweep_grid);
  f("eval.sweep_mu_actual", c.eval.sweep_mu_actual);
  f("eval.sweep_trials", c.eval.sweep_trials);
  f("eval.keep_trajectory", c.eval.keep_trajectory);
}

json::json_pointer pointer(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) p += "/" + part;
  return json::json_pointer(p);
}

void reject_unknown(const json& given, const json& known, const std::string& prefix) {
  if (!given.is_object()) {
    throw ConfigInvalid("config section '" + prefix + "' must be an object");
  }
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!known.contains(key)) throw ConfigInvalid("unknown config key '" + path + "'");
    if (known.at(key).is_object()) reject_unknown(value, known.at(key), path);
  }
}

void merge_into(json& base, const json& over) {
  for (const auto& [key, value] : over.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object()) {
      merge_into(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  RunConfig copy = c;
  std::string variant = to_string(c.train.variant);
  std::array<double, 4> q{c.lqr.q_diag(0), c.lqr.q_diag(1), c.lqr.q_diag(2),
                          c.lqr.q_diag(3)};
  json j = json::object();
  visit_fields(copy, variant, q,
               [&](const std::string& key, auto& v) { j[pointer(key)] = v; });
  return j;
}

RunConfig config_from_json(const json& j) {
  const RunConfig defaults;
  reject_unknown(j, to_json(defaults), "");
  RunConfig c;
  std::string variant = to_string(c.train.variant);
  std::array<double, 4> q{c.lqr.q_diag(0), c.lqr.q_diag(1), c.lqr.q_diag(2),
                          c.lqr.q_diag(3)};
  visit_fields(c, variant, q, [&](const std::string& key, auto& v) {
    const auto ptr = pointer(key);
    if (!j.contains(ptr)) return;
    try {
      j.at(ptr).get_to(v);
    } catch (const json::exception&) {
      throw ConfigInvalid("config key '" + key + "' has the wrong type");
    }
  });
  c.train.variant = variant_from_string(variant);
  c.lqr.q_diag = Eigen::Vector4d(q[0], q[1], q[2], q[3]);
  c.validate();
  return c;
}

void RunConfig::validate() const {
  try {
    train.env.sim.validate();
  } catch (const Error& e) {
    throw ConfigInvalid(std::string("sim: ") + e.what());
  }
  train.ppo.validate();
  const auto& env = train.env;
  if (env.t_max < 1 || env.decimation < 1) throw ConfigInvalid("env.t_max and env.decimation must be positive");
  if (!(env.beta_fail > 0) || !(env.v_max > 0) || !(env.mu_max > 0) ||
      !(env.command_duration > 0) || !(env.reward_action_scale > 0)) {
    throw ConfigInvalid("env limits must be positive");
  }
  if (!(env.target_range >= 0) || !(env.init_beta >= 0)) {
    throw ConfigInvalid("env ranges must be non-negative");
  }
  if (!(env.reward.output_penalty_low >= 0 &&
        env.reward.output_penalty_low <= env.reward.output_penalty_high)) {
    throw ConfigInvalid("reward penalties must satisfy 0 <= low <= high");
  }
  if (!(train.mu_lo >= 0 && train.mu_lo <= train.mu_hi)) {
    throw ConfigInvalid("train friction range must satisfy 0 <= lo <= hi");
  }
  if (!(train.noise.sigma >= 0) || train.noise.p_outlier < 0 || train.noise.p_outlier > 1) {
    throw ConfigInvalid("noise parameters out of range");
  }
  const auto& d = train.distill;
  if (d.iterations < 0 || d.horizon < 1 || d.num_envs < 1 || d.epochs < 1 ||
      d.minibatches < 1 || d.history < 1 || !(d.lr > 0)) {
    throw ConfigInvalid("distill counts must be positive");
  }
  if (!(lqr.r > 0) || (lqr.q_diag.array() < 0).any()) {
    throw ConfigInvalid("lqr weights must be PSD with r > 0");
  }
  if (ffv.k < 1 || ffv.max_retries < 0 || !(ffv.timeout_s > 0)) {
    throw ConfigInvalid("ffv.k, ffv.max_retries and ffv.timeout_s out of range");
  }
  if (eval.episodes < 0 || eval.sweep_trials < 1 || eval.sweep_grid.empty()) {
    throw ConfigInvalid("eval counts out of range");
  }
  if (!(eval.mu_lo >= 0 && eval.mu_lo <= eval.mu_hi)) {
    throw ConfigInvalid("eval friction range must satisfy 0 <= lo <= hi");
  }
  mu_input_mode_from_string(eval.mu_input);
}

EvalSpec RunConfig::eval_spec() const {
  EvalSpec s;
  s.env = train.env;
  s.noise = train.noise;
  s.episodes = eval.episodes;
  s.mu_lo = eval.mu_lo;
  s.mu_hi = eval.mu_hi;
  s.mu_input = {mu_input_mode_from_string(eval.mu_input), eval.mu_input_value};
  s.seed = train.seed;
  s.keep_trajectory = eval.keep_trajectory;
  return s;
}

json load_config_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigInvalid("cannot open config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  json user;
  try {
    user = json::parse(buf.str(), nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigInvalid("config file '" + path.string() + "': " + e.what());
  }
  json base = to_json(RunConfig{});
  reject_unknown(user, base, "");
  merge_into(base, user);
  return base;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigInvalid("override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  const auto ptr = pointer(key);
  const json defaults = to_json(RunConfig{});
  if (!defaults.contains(ptr) || defaults.at(ptr).is_object()) {
    throw ConfigInvalid("unknown config key '" + key + "'");
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  j[ptr] = value;
}

RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides) {
  json j = path.empty() ? to_json(RunConfig{}) : load_config_json(path);
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

}  // namespace wiplab
