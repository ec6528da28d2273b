// wiplab: train, evaluate, sweep and estimate friction from one binary.
// Exit codes: 0 success, 1 runtime error, 2 configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "wiplab/config.hpp"
#include "wiplab/errors.hpp"
#include "wiplab/eval.hpp"
#include "wiplab/ffv.hpp"
#include "wiplab/ppo.hpp"

#ifndef WIPLAB_GIT_HASH
#define WIPLAB_GIT_HASH "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace wiplab;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("-c,--config", c.config, "run config (JSON with comments)");
  cmd->add_option("--set", c.sets, "override, e.g. --set ppo.lr=1e-3")->take_all();
  cmd->add_option("--seed", c.seed, "root seed");
  if (needs_out) cmd->add_option("-o,--out", c.out, "output directory")->required();
}

RunConfig resolve(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> sets = c.sets;
  if (c.seed >= 0) sets.push_back("seed=" + std::to_string(c.seed));
  sets.insert(sets.end(), extra.begin(), extra.end());
  return load_config(c.config, sets);
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const RunConfig& cfg, const json& extra = json::object()) {
  json m = {{"tool", "wiplab"},
            {"command", command},
            {"git", WIPLAB_GIT_HASH},
            {"config", to_json(cfg)}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_text(dir / "run_manifest.json", m.dump(2) + "\n");
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigInvalid("cannot parse '" + item + "' as a number");
    }
  }
  if (out.empty()) throw ConfigInvalid("empty number list");
  return out;
}

int cmd_train(const Common& c, const std::string& variant, const std::string& teacher,
              int iterations) {
  std::vector<std::string> extra;
  if (!variant.empty()) extra.push_back("variant=\"" + variant + "\"");
  if (iterations >= 0) extra.push_back("ppo.iterations=" + std::to_string(iterations));
  const RunConfig cfg = resolve(c, extra);
  const fs::path dir = c.out;
  fs::create_directories(dir);
  const json snapshot = to_json(cfg);

  if (cfg.train.variant == Variant::Student) {
    if (teacher.empty()) throw ConfigInvalid("student training needs --teacher <checkpoint>");
    nn::Checkpoint tck;
    try {
      tck = nn::Checkpoint::load(teacher);
    } catch (const std::exception& e) {
      throw CheckpointLoad(std::string("teacher: ") + e.what());
    }
    const DistillResult r = distill_student(tck, cfg.train, snapshot);
    std::ostringstream csv;
    csv << "iteration,mse\n";
    csv.precision(17);
    for (const auto& m : r.metrics) csv << m.iteration << ',' << m.mse << '\n';
    write_text(dir / "distill_metrics.csv", csv.str());
    r.checkpoint.save(dir / "policy.ckpt");
    write_manifest(dir, "train", cfg, {{"teacher", teacher}});
    std::printf("student: final mse %.6g -> %s\n",
                r.metrics.empty() ? 0.0 : r.metrics.back().mse,
                (dir / "policy.ckpt").c_str());
    return 0;
  }

  std::ofstream metrics(dir / "metrics.csv", std::ios::binary);
  if (!metrics) throw Error("cannot write " + (dir / "metrics.csv").string());
  metrics << metrics_csv_header() << '\n';
  const TrainResult r = train(cfg.train, snapshot, [&](const IterationMetrics& m) {
    metrics << metrics_csv_row(m) << '\n';
    metrics.flush();
    if (m.iteration % 10 == 0) {
      std::fprintf(stderr, "iter %4d  reward %.4f  episode %.1f  zeta %.3f\n", m.iteration,
                   m.mean_reward, m.mean_episode_length, m.zeta);
    }
  });
  if (!r.aborted.empty()) {
    r.checkpoint.save(dir / "policy_aborted.ckpt");
    write_manifest(dir, "train", cfg, {{"aborted", r.aborted}});
    throw NonFiniteLoss(r.aborted + "; state dumped to policy_aborted.ckpt");
  }
  r.checkpoint.save(dir / "policy.ckpt");
  write_manifest(dir, "train", cfg);
  std::printf("%s: %zu iterations -> %s\n", to_string(cfg.train.variant).c_str(),
              r.metrics.size(), (dir / "policy.ckpt").c_str());
  return 0;
}

void apply_mu_input(EvalSpec& spec, const std::string& mu_input) {
  if (mu_input.empty()) return;
  if (mu_input == "truth" || mu_input == "noisy") {
    spec.mu_input.mode = mu_input_mode_from_string(mu_input);
  } else {
    spec.mu_input = {MuInputMode::Fixed, parse_list(mu_input).at(0)};
  }
}

void apply_range(EvalSpec& spec, const std::string& range) {
  if (range.empty()) return;
  const auto colon = range.find(':');
  if (colon == std::string::npos) {
    spec.mu_lo = spec.mu_hi = parse_list(range).at(0);
  } else {
    spec.mu_lo = parse_list(range.substr(0, colon)).at(0);
    spec.mu_hi = parse_list(range.substr(colon + 1)).at(0);
  }
  if (!(spec.mu_lo >= 0 && spec.mu_lo <= spec.mu_hi)) {
    throw ConfigInvalid("friction range must satisfy 0 <= lo <= hi");
  }
}

int cmd_eval(const Common& c, const std::vector<std::string>& controllers, int episodes,
             const std::string& mu, const std::string& mu_input, const char* command) {
  const RunConfig cfg = resolve(c);
  EvalSpec spec = cfg.eval_spec();
  if (episodes >= 0) spec.episodes = episodes;
  apply_range(spec, mu);
  apply_mu_input(spec, mu_input);

  std::vector<std::unique_ptr<Controller>> owned;
  std::vector<Controller*> ptrs;
  json sources = json::object();
  for (const auto& item : controllers) {
    const auto eq = item.find('=');
    const std::string name = eq == std::string::npos ? std::string() : item.substr(0, eq);
    const std::string src = eq == std::string::npos ? item : item.substr(eq + 1);
    owned.push_back(load_controller(src, spec.env, cfg.lqr, name));
    ptrs.push_back(owned.back().get());
    sources[owned.back()->name()] = src;
  }
  const Comparison cmp = compare(ptrs, spec);
  const fs::path dir = c.out;
  std::vector<RunRecord> all;
  for (const auto& recs : cmp.records) all.insert(all.end(), recs.begin(), recs.end());
  write_records(all, dir / "records.jsonl");
  write_text(dir / "summary.csv", summary_csv(cmp.rows));
  write_manifest(dir, command, cfg,
                 {{"controllers", sources},
                  {"episodes", spec.episodes},
                  {"mu_range", {spec.mu_lo, spec.mu_hi}},
                  {"mu_input", {to_string(spec.mu_input.mode), spec.mu_input.value}}});
  std::cout << summary_csv(cmp.rows);
  return 0;
}

int cmd_sweep(const Common& c, const std::string& controller, const std::string& grid,
              const std::string& mu_actual, int trials) {
  const RunConfig cfg = resolve(c);
  EvalSpec base = cfg.eval_spec();
  SweepSpec sweep;
  sweep.mu_input_grid = grid.empty() ? cfg.eval.sweep_grid : parse_list(grid);
  sweep.mu_actual_lo = sweep.mu_actual_hi = cfg.eval.sweep_mu_actual;
  if (!mu_actual.empty()) {
    EvalSpec tmp;
    apply_range(tmp, mu_actual);
    sweep.mu_actual_lo = tmp.mu_lo;
    sweep.mu_actual_hi = tmp.mu_hi;
  }
  sweep.trials = trials > 0 ? trials : cfg.eval.sweep_trials;
  sweep.validate();
  auto ctrl = load_controller(controller, base.env, cfg.lqr);
  std::vector<RunRecord> records;
  const auto cells = sweep_cof(*ctrl, sweep, base, &records);
  const fs::path dir = c.out;
  write_records(records, dir / "records.jsonl");
  write_text(dir / "sweep.csv", sweep_csv(cells));
  write_manifest(dir, "sweep", cfg,
                 {{"controller", controller},
                  {"grid", sweep.mu_input_grid},
                  {"mu_actual", {sweep.mu_actual_lo, sweep.mu_actual_hi}},
                  {"trials", sweep.trials}});
  std::cout << sweep_csv(cells);
  return 0;
}

int cmd_export(const std::string& run, const std::string& out) {
  const fs::path dir = run;
  std::ifstream in(dir / "run_manifest.json");
  if (!in) throw Error("no run_manifest.json in " + dir.string());
  const json manifest = json::parse(in);
  const RunConfig cfg = config_from_json(manifest.at("config"));
  const auto records = read_records(dir / "records.jsonl");
  const fs::path target = out.empty() ? dir / "plots" : fs::path(out);
  for (const auto& f : export_plots(records, cfg.train.env, target)) {
    std::cout << f.string() << '\n';
  }
  return 0;
}

std::vector<double> load_vector_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigInvalid("cannot open embedding file '" + path + "'");
  return json::parse(in).get<std::vector<double>>();
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigInvalid("cannot open image '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct EstimateArgs {
  std::string cache;
  std::string embedding_id;
  std::string embedding_file;
  std::string image;
  std::string mock;
  bool live = false;
  bool validate = false;
  int k = 0;
};

int cmd_estimate(const Common& c, const EstimateArgs& a) {
  const RunConfig cfg = resolve(c);
  const std::string cache_path = a.cache.empty() ? cfg.ffv.cache : a.cache;
  if (cache_path.empty()) throw ConfigInvalid("no cache given (--cache or ffv.cache)");

  if (a.validate) {
    const auto problems = ffv::check_cache_file(cache_path);
    if (problems.empty()) {
      std::cout << cache_path << ": ok\n";
      return 0;
    }
    for (const auto& p : problems) std::cerr << cache_path << ": " << p << '\n';
    return 1;
  }

  if (a.live == !a.mock.empty()) throw ConfigInvalid("choose exactly one of --mock <script> or --live");
  std::unique_ptr<ffv::LlmClient> client;
  if (a.live) {
    client = std::make_unique<ffv::HttpClient>(ffv::HttpClient::from_env(cfg.ffv.endpoint));
  } else {
    client = std::make_unique<ffv::MockClient>(ffv::MockClient::from_file(a.mock));
  }

  const ffv::EmbeddingCache cache = ffv::load_cache(cache_path);
  std::vector<double> query;
  if (!a.embedding_id.empty()) {
    const auto* rec = cache.find(a.embedding_id);
    if (!rec) throw ConfigInvalid("no record '" + a.embedding_id + "' in " + cache_path);
    query = rec->vector;
  } else if (!a.embedding_file.empty()) {
    query = load_vector_file(a.embedding_file);
  } else {
    throw ConfigInvalid("give --embedding-id or --embedding (the encoder runs offline)");
  }

  ffv::EstimateOptions opts;
  opts.k = a.k > 0 ? a.k : cfg.ffv.k;
  opts.max_retries = cfg.ffv.max_retries;
  opts.backoff_initial_s = a.live ? cfg.ffv.backoff_s : 0.0;
  opts.timeout = std::chrono::milliseconds(static_cast<long>(cfg.ffv.timeout_s * 1000));
  opts.mu_max = cfg.ffv.mu_max;
  opts.model = cfg.ffv.model;
  if (!a.image.empty()) opts.image = read_bytes(a.image);
  const ffv::FrictionEstimate est = ffv::estimate(query, cache, *client, opts);

  std::printf("CoF estimate: %s\n", ffv::format_cof(est.mu_hat).c_str());
  for (const auto& h : est.hits) {
    std::printf("  %-5s %-24s %.6f\n", ffv::to_string(h.kind).c_str(), h.id.c_str(), h.score);
  }
  for (const auto& r : est.retry_log) std::printf("  retry: %s\n", r.c_str());
  std::printf("latency: %.3f s\n", est.latency_s);
  return 0;
}

int cmd_build_cache(const std::vector<std::string>& inputs, const std::string& output) {
  std::vector<ffv::EmbeddingCache> parts;
  for (const auto& in : inputs) parts.push_back(ffv::load_cache(in));
  const auto merged = ffv::merge_caches(parts);
  ffv::save_cache(merged, output);
  std::printf("%s: %zu image, %zu text records, dimension %d\n", output.c_str(),
              merged.count(ffv::RecordKind::Image), merged.count(ffv::RecordKind::Text),
              merged.dimension);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wiplab: friction-aware WIP locomotion laboratory"};
  app.require_subcommand(1);

  Common train_c;
  std::string variant, teacher;
  int iterations = -1;
  auto* train_cmd = app.add_subcommand("train", "train a policy variant");
  add_common(train_cmd, train_c);
  train_cmd->add_option("--variant", variant,
                        "ours | ppo | ppo+dr | teacher | student | xtr-ablation");
  train_cmd->add_option("--teacher", teacher, "teacher checkpoint (student only)");
  train_cmd->add_option("--iterations", iterations, "PPO iterations");

  Common eval_c;
  std::string eval_ckpt, eval_mu, eval_mu_input;
  int eval_episodes = -1;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate one controller");
  add_common(eval_cmd, eval_c);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path or 'lqr'")->required();
  eval_cmd->add_option("--episodes", eval_episodes);
  eval_cmd->add_option("--mu", eval_mu, "actual friction: value or lo:hi");
  eval_cmd->add_option("--mu-input", eval_mu_input, "truth | noisy | <value>");

  Common cmp_c;
  std::vector<std::string> cmp_ctrls;
  std::string cmp_mu, cmp_mu_input;
  int cmp_episodes = -1;
  auto* cmp_cmd = app.add_subcommand("compare", "paired evaluation of several controllers");
  add_common(cmp_cmd, cmp_c);
  cmp_cmd->add_option("--controller", cmp_ctrls, "name=checkpoint or lqr")->required()->take_all();
  cmp_cmd->add_option("--episodes", cmp_episodes);
  cmp_cmd->add_option("--mu", cmp_mu, "actual friction: value or lo:hi");
  cmp_cmd->add_option("--mu-input", cmp_mu_input, "truth | noisy | <value>");

  Common sweep_c;
  std::string sweep_ckpt, sweep_grid, sweep_actual;
  int sweep_trials = 0;
  auto* sweep_cmd = app.add_subcommand("sweep", "success and error versus friction input");
  add_common(sweep_cmd, sweep_c);
  sweep_cmd->add_option("--checkpoint", sweep_ckpt, "checkpoint path or 'lqr'")->required();
  sweep_cmd->add_option("--mu-input", sweep_grid, "comma-separated grid");
  sweep_cmd->add_option("--mu-actual", sweep_actual, "value or lo:hi");
  sweep_cmd->add_option("--trials", sweep_trials);

  Common est_c;
  EstimateArgs est;
  auto* est_cmd = app.add_subcommand("estimate", "friction from vision via retrieval and an LLM");
  add_common(est_cmd, est_c, false);
  est_cmd->add_option("--cache", est.cache, "embedding cache file");
  est_cmd->add_option("--embedding-id", est.embedding_id, "use a cached record as the query");
  est_cmd->add_option("--embedding", est.embedding_file, "JSON array with the query embedding");
  est_cmd->add_option("--image", est.image, "query image uploaded to the live endpoint");
  est_cmd->add_option("--mock", est.mock, "scripted response file");
  est_cmd->add_flag("--live", est.live, "call FFV_ENDPOINT with FFV_API_KEY");
  est_cmd->add_flag("--validate-cache", est.validate, "check the cache schema and exit");
  est_cmd->add_option("-k", est.k, "top-K per kind");

  std::vector<std::string> bc_inputs;
  std::string bc_output;
  auto* bc_cmd = app.add_subcommand("build-cache", "validate and merge embedding caches");
  bc_cmd->add_option("--input", bc_inputs, "cache files")->required()->take_all();
  bc_cmd->add_option("-o,--output", bc_output, "merged cache")->required();

  std::string exp_run, exp_out;
  auto* exp_cmd = app.add_subcommand("export", "plot data from an evaluation run");
  exp_cmd->add_option("--run", exp_run, "evaluation run directory")->required();
  exp_cmd->add_option("-o,--out", exp_out, "output directory (default <run>/plots)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(train_c, variant, teacher, iterations);
    if (*eval_cmd) return cmd_eval(eval_c, {eval_ckpt}, eval_episodes, eval_mu, eval_mu_input, "eval");
    if (*cmp_cmd) return cmd_eval(cmp_c, cmp_ctrls, cmp_episodes, cmp_mu, cmp_mu_input, "compare");
    if (*sweep_cmd) return cmd_sweep(sweep_c, sweep_ckpt, sweep_grid, sweep_actual, sweep_trials);
    if (*est_cmd) return cmd_estimate(est_c, est);
    if (*bc_cmd) return cmd_build_cache(bc_inputs, bc_output);
    if (*exp_cmd) return cmd_export(exp_run, exp_out);
  } catch (const ConfigInvalid& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
