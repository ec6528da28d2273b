#include "wiplab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "wiplab/errors.hpp"

namespace wiplab {

using nlohmann::json;

json to_json(const RunRecord& r) {
  json traj = json::array();
  for (const auto& p : r.trajectory) {
    traj.push_back(json::array({p.t, p.p, p.c_pos, p.beta, p.action}));
  }
  return {{"variant", r.variant},       {"seed", r.seed},
          {"episode", r.episode},       {"mu_actual", r.mu_actual},
          {"mu_input", r.mu_input},     {"target", r.target},
          {"length", r.length},         {"success", r.success},
          {"rms_error", r.rms_error},   {"max_abs_beta", r.max_abs_beta},
          {"slip_distance", r.slip_distance},
          {"trajectory", traj}};
}

RunRecord record_from_json(const json& j) {
  RunRecord r;
  r.variant = j.at("variant").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.episode = j.at("episode").get<int>();
  r.mu_actual = j.at("mu_actual").get<double>();
  r.mu_input = j.at("mu_input").get<double>();
  r.target = j.at("target").get<double>();
  r.length = j.at("length").get<int>();
  r.success = j.at("success").get<bool>();
  r.rms_error = j.at("rms_error").get<double>();
  r.max_abs_beta = j.at("max_abs_beta").get<double>();
  r.slip_distance = j.at("slip_distance").get<double>();
  for (const auto& p : j.at("trajectory")) {
    r.trajectory.push_back({p.at(0).get<double>(), p.at(1).get<double>(),
                            p.at(2).get<double>(), p.at(3).get<double>(),
                            p.at(4).get<double>()});
  }
  return r;
}

PolicyController::PolicyController(Policy policy, std::string name)
    : policy_(std::move(policy)),
      name_(name.empty() ? to_string(policy_.variant) : std::move(name)),
      history_(policy_.history) {}

void PolicyController::reset() { history_.clear(); }

double PolicyController::act(const Observation& obs) {
  double latent = 0.0;
  if (policy_.variant == Variant::Student) {
    history_.push(policy_.proprio(obs));
    latent = policy_.latent_from_history(history_.flat());
  }
  const auto x = policy_.input(obs, obs.mu_hat, latent);
  return policy_.v_max * policy_.mean_action(x);
}

LqrController::LqrController(const WipParams& params, const LqrWeights& weights,
                             double v_max)
    : params_(params), v_max_(v_max) {
  const LinearModel model = linearize(params);
  gains_ = dare_solve(model, Matrix4(weights.q_diag.asDiagonal()), weights.r);
}

double LqrController::act(const Observation& obs) {
  WipState s;
  s.p = obs.x_tr;
  s.p_dot = obs.x_tr_dot;
  s.phi = obs.x_w;
  s.phi_dot = obs.x_w_dot;
  s.beta = obs.beta;
  s.beta_dot = obs.beta_dot;
  return lqr_action(gains_, s, {obs.c_pos, obs.c_vel}, params_, v_max_);
}

std::unique_ptr<Controller> load_controller(const std::string& source,
                                            const EnvConfig& env,
                                            const LqrWeights& weights,
                                            const std::string& name) {
  if (source == "lqr") {
    return std::make_unique<LqrController>(env.sim, weights, env.v_max);
  }
  nn::Checkpoint ck;
  try {
    ck = nn::Checkpoint::load(source);
  } catch (const CheckpointLoad&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointLoad("cannot load checkpoint '" + source + "': " + e.what());
  }
  return std::make_unique<PolicyController>(Policy::from_checkpoint(ck), name);
}

MuInputMode mu_input_mode_from_string(const std::string& s) {
  if (s == "truth") return MuInputMode::Truth;
  if (s == "noisy") return MuInputMode::Noisy;
  if (s == "fixed") return MuInputMode::Fixed;
  throw ConfigInvalid("unknown mu_input mode '" + s + "'");
}

std::string to_string(MuInputMode m) {
  switch (m) {
    case MuInputMode::Truth: return "truth";
    case MuInputMode::Noisy: return "noisy";
    case MuInputMode::Fixed: return "fixed";
  }
  return "?";
}

EpisodeSetup episode_condition(const EvalSpec& spec, int episode) {
  Rng command_rng = make_rng(spec.seed, "command", static_cast<std::uint64_t>(episode));
  Rng friction_rng = make_rng(spec.seed, "friction", static_cast<std::uint64_t>(episode));
  Rng noise_rng = make_rng(spec.seed, "noise", static_cast<std::uint64_t>(episode));
  EpisodeSetup s = sample_episode(spec.env, command_rng);
  s.mu = spec.mu_lo == spec.mu_hi
             ? spec.mu_lo
             : randomize_friction(friction_rng, spec.mu_lo, spec.mu_hi);
  switch (spec.mu_input.mode) {
    case MuInputMode::Truth: s.mu_hat = s.mu; break;
    case MuInputMode::Noisy:
      s.mu_hat = noisify_mu(s.mu, spec.noise, noise_rng, spec.env.mu_max);
      break;
    case MuInputMode::Fixed: s.mu_hat = spec.mu_input.value; break;
  }
  return s;
}

RunRecord run_episode(Controller& c, const EvalSpec& spec, int episode) {
  const EpisodeSetup setup = episode_condition(spec, episode);
  WipEnv env(spec.env, ObsMode::Deployment);
  env.reset(setup);
  c.reset();

  RunRecord r;
  r.variant = c.name();
  r.seed = spec.seed;
  r.episode = episode;
  r.mu_actual = setup.mu;
  r.mu_input = env.observe().mu_hat;
  r.target = setup.command.target;
  r.max_abs_beta = std::abs(setup.initial.beta);
  if (spec.keep_trajectory) r.trajectory.reserve(static_cast<std::size_t>(spec.env.t_max));

  Observation obs = env.observe();
  double se = 0.0;
  StepOutcome out;
  while (!env.done()) {
    const double a = c.act(obs);
    out = env.step(a, 1.0);
    se += out.tracking_error * out.tracking_error;
    r.slip_distance += out.slip_distance;
    r.max_abs_beta = std::max(r.max_abs_beta, std::abs(env.state().beta));
    if (spec.keep_trajectory) {
      r.trajectory.push_back({out.time, env.state().p, env.command_now().position,
                              env.state().beta, std::clamp(a, -spec.env.v_max, spec.env.v_max)});
    }
    obs = out.obs;
  }
  r.length = env.steps();
  r.success = !out.failed && r.length == spec.env.t_max;
  r.rms_error = r.length > 0 ? std::sqrt(se / r.length) : 0.0;
  return r;
}

std::vector<RunRecord> evaluate(Controller& c, const EvalSpec& spec) {
  std::vector<RunRecord> records(static_cast<std::size_t>(std::max(spec.episodes, 0)));
  // Controllers carry per-episode state, so parallel workers would need
  // their own copies; episodes are independent, order is by index.
  for (int e = 0; e < spec.episodes; ++e) records[e] = run_episode(c, spec, e);
  return records;
}

Summary summarize(const std::vector<RunRecord>& records, const std::string& variant) {
  Summary s;
  s.variant = variant.empty() && !records.empty() ? records.front().variant : variant;
  s.episodes = static_cast<int>(records.size());
  if (records.empty()) return s;
  s.defined = true;
  double sum = 0.0, slip = 0.0;
  for (const auto& r : records) {
    s.successes += r.success ? 1 : 0;
    sum += r.rms_error;
    slip += r.slip_distance;
  }
  const double n = static_cast<double>(records.size());
  s.success_rate = s.successes / n;
  s.mean_error = sum / n;
  s.mean_slip = slip / n;
  double var = 0.0;
  for (const auto& r : records) var += (r.rms_error - s.mean_error) * (r.rms_error - s.mean_error);
  s.std_error = std::sqrt(var / n);
  return s;
}

Comparison compare(const std::vector<Controller*>& controllers, const EvalSpec& spec) {
  Comparison out;
  for (Controller* c : controllers) {
    out.records.push_back(evaluate(*c, spec));
    out.rows.push_back(summarize(out.records.back(), c->name()));
  }
  return out;
}

void SweepSpec::validate() const {
  if (mu_input_grid.empty()) throw ConfigInvalid("sweep grid is empty");
  if (trials < 1) throw ConfigInvalid("sweep needs at least one trial per cell");
  if (!(mu_actual_lo >= 0 && mu_actual_lo <= mu_actual_hi)) {
    throw ConfigInvalid("sweep mu_actual range must satisfy 0 <= lo <= hi");
  }
}

std::vector<SweepCell> sweep_cof(Controller& c, const SweepSpec& sweep,
                                 const EvalSpec& base,
                                 std::vector<RunRecord>* records) {
  sweep.validate();
  std::vector<SweepCell> cells;
  for (double mu_in : sweep.mu_input_grid) {
    EvalSpec spec = base;
    spec.episodes = sweep.trials;
    spec.mu_lo = sweep.mu_actual_lo;
    spec.mu_hi = sweep.mu_actual_hi;
    spec.mu_input = {MuInputMode::Fixed, mu_in};
    auto recs = evaluate(c, spec);
    const Summary s = summarize(recs);
    cells.push_back({mu_in, s.episodes, s.successes, s.success_rate,
                     s.mean_error, s.std_error});
    if (records) records->insert(records->end(), recs.begin(), recs.end());
  }
  return cells;
}

PlotSeries plot_series(const std::vector<RunRecord>& records, const EnvConfig& env) {
  std::vector<const RunRecord*> ok;
  for (const auto& r : records) {
    if (r.success && static_cast<int>(r.trajectory.size()) == env.t_max) ok.push_back(&r);
  }
  if (ok.empty()) throw NoSuccessfulEpisodes("no successful episode to plot");
  const auto n = static_cast<std::size_t>(env.t_max);
  PlotSeries s;
  s.t.resize(n);
  s.mean_p.assign(n, 0.0);
  s.std_p.assign(n, 0.0);
  s.c_pos.assign(n, 0.0);
  const double m = static_cast<double>(ok.size());
  for (std::size_t k = 0; k < n; ++k) {
    s.t[k] = static_cast<double>(k + 1) * env.decision_dt();
    for (const auto* r : ok) {
      s.mean_p[k] += r->trajectory[k].p;
      s.c_pos[k] += r->trajectory[k].c_pos;
    }
    s.mean_p[k] /= m;
    s.c_pos[k] /= m;
    for (const auto* r : ok) {
      const double d = r->trajectory[k].p - s.mean_p[k];
      s.std_p[k] += d * d;
    }
    s.std_p[k] = std::sqrt(s.std_p[k] / m);
  }
  return s;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::vector<std::filesystem::path> export_plots(const std::vector<RunRecord>& records,
                                                const EnvConfig& env,
                                                const std::filesystem::path& dir) {
  if (records.empty()) throw NoSuccessfulEpisodes("no records to export");
  std::map<std::string, std::vector<RunRecord>> by_variant;
  for (const auto& r : records) by_variant[r.variant].push_back(r);
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> files;
  bool any = false;
  for (const auto& [variant, recs] : by_variant) {
    PlotSeries s;
    try {
      s = plot_series(recs, env);
    } catch (const NoSuccessfulEpisodes&) {
      continue;
    }
    any = true;
    std::ostringstream os;
    os << "t,mean_p,std_p,c_pos\n";
    for (std::size_t k = 0; k < s.t.size(); ++k) {
      os << fmt(s.t[k]) << ',' << fmt(s.mean_p[k]) << ',' << fmt(s.std_p[k]) << ','
         << fmt(s.c_pos[k]) << '\n';
    }
    std::string file = variant;
    std::replace(file.begin(), file.end(), '+', '_');
    const auto path = dir / (file + "_trajectory.csv");
    write_text(path, os.str());
    files.push_back(path);
  }
  if (!any) throw NoSuccessfulEpisodes("no variant has a successful episode");
  return files;
}

std::string summary_csv(const std::vector<Summary>& rows) {
  std::ostringstream os;
  os << "variant,episodes,successes,success_rate,mean_rms_error,std_rms_error,mean_slip\n";
  for (const auto& r : rows) {
    os << r.variant << ',' << r.episodes << ',' << r.successes << ','
       << fmt(r.success_rate) << ',' << fmt(r.mean_error) << ',' << fmt(r.std_error)
       << ',' << fmt(r.mean_slip) << '\n';
  }
  return os.str();
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
  std::ostringstream os;
  os << "mu_input,trials,successes,success_rate,mean_rms_error,std_rms_error\n";
  for (const auto& c : cells) {
    os << fmt(c.mu_input) << ',' << c.trials << ',' << c.successes << ','
       << fmt(c.success_rate) << ',' << fmt(c.mean_error) << ',' << fmt(c.std_error)
       << '\n';
  }
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

void write_records(const std::vector<RunRecord>& records,
                   const std::filesystem::path& path) {
  std::ostringstream os;
  for (const auto& r : records) os << to_json(r).dump() << '\n';
  write_text(path, os.str());
}

std::vector<RunRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<RunRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json(json::parse(line)));
  }
  return out;
}

}  // namespace wiplab
