#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "wiplab/errors.hpp"
#include "wiplab/eval.hpp"

using namespace wiplab;

namespace {

EvalSpec small_spec(int episodes) {
  EvalSpec s;
  s.episodes = episodes;
  s.seed = 21;
  s.env.t_max = 150;
  return s;
}

RunRecord fake(const std::string& variant, bool success, int n, double offset) {
  RunRecord r;
  r.variant = variant;
  r.success = success;
  r.length = n;
  for (int k = 0; k < n; ++k) {
    r.trajectory.push_back({(k + 1) * 0.02, offset + 0.01 * k, 0.005 * k, 0.0, 0.0});
  }
  return r;
}

std::filesystem::path scratch(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("wiplab_eval_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(Evaluate, EmptyEpisodeListIsUndefined) {
  LqrController lqr(WipParams{}, LqrWeights{}, 20.0);
  const auto recs = evaluate(lqr, small_spec(0));
  EXPECT_TRUE(recs.empty());
  EXPECT_FALSE(summarize(recs).defined);
}

TEST(Evaluate, SameSeedSameRecords) {
  LqrController lqr(WipParams{}, LqrWeights{}, 20.0);
  const auto a = evaluate(lqr, small_spec(4));
  const auto b = evaluate(lqr, small_spec(4));
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(to_json(a[i]), to_json(b[i]));
}

TEST(Evaluate, LqrTracksAtHighFriction) {
  EnvConfig env;
  LqrController lqr(env.sim, LqrWeights{}, env.v_max);
  WipEnv w(env, ObsMode::Deployment);
  EpisodeSetup setup;
  setup.mu = setup.mu_hat = 10.0;
  setup.command = Command::rest_to_rest(0.2, env.command_duration);
  w.reset(setup);
  double se = 0.0;
  StepOutcome out;
  while (!w.done()) {
    out = w.step(lqr.act(w.observe()), 1.0);
    se += out.tracking_error * out.tracking_error;
  }
  EXPECT_TRUE(out.timeout);
  const double rms = std::sqrt(se / w.steps());
  EXPECT_TRUE(std::isfinite(rms));
  EXPECT_LT(rms, 0.05);
  EXPECT_NEAR(w.state().p, 0.2, 0.01);
}

TEST(Evaluate, PairedConditionsAcrossControllers) {
  const EvalSpec spec = small_spec(5);
  for (int e = 0; e < 5; ++e) {
    const EpisodeSetup a = episode_condition(spec, e), b = episode_condition(spec, e);
    EXPECT_EQ(a.mu, b.mu);
    EXPECT_EQ(a.command.target, b.command.target);
    EXPECT_EQ(a.initial.beta, b.initial.beta);
    EXPECT_GE(a.mu, spec.mu_lo);
    EXPECT_LE(a.mu, spec.mu_hi);
    EXPECT_EQ(a.mu_hat, a.mu);
  }
  EvalSpec fixed = spec;
  fixed.mu_input = {MuInputMode::Fixed, 0.75};
  EXPECT_EQ(episode_condition(fixed, 3).mu_hat, 0.75);
  EXPECT_EQ(episode_condition(fixed, 3).mu, episode_condition(spec, 3).mu);
}

TEST(Compare, SelfComparisonGivesIdenticalRows) {
  LqrController a(WipParams{}, LqrWeights{}, 20.0), b(WipParams{}, LqrWeights{}, 20.0);
  const Comparison c = compare({&a, &b}, small_spec(3));
  ASSERT_EQ(c.rows.size(), 2u);
  EXPECT_EQ(c.rows[0].mean_error, c.rows[1].mean_error);
  EXPECT_EQ(c.rows[0].successes, c.rows[1].successes);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(c.records[0][e].mu_actual, c.records[1][e].mu_actual);
    EXPECT_EQ(c.records[0][e].target, c.records[1][e].target);
  }
}

TEST(Sweep, OneCellOneTrial) {
  LqrController lqr(WipParams{}, LqrWeights{}, 20.0);
  SweepSpec sw;
  sw.mu_input_grid = {1.0};
  sw.trials = 1;
  const auto cells = sweep_cof(lqr, sw, small_spec(0));
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0].trials, 1);
  EXPECT_LE(cells[0].successes, cells[0].trials);
  sw.mu_input_grid.clear();
  EXPECT_THROW(sweep_cof(lqr, sw, small_spec(0)), ConfigInvalid);
}

TEST(Sweep, CountsBounded) {
  LqrController lqr(WipParams{}, LqrWeights{}, 20.0);
  SweepSpec sw;
  sw.mu_input_grid = {0.5, 1.0, 1.5};
  sw.trials = 3;
  std::vector<RunRecord> recs;
  const auto cells = sweep_cof(lqr, sw, small_spec(0), &recs);
  EXPECT_EQ(cells.size(), 3u);
  EXPECT_EQ(recs.size(), 9u);
  for (const auto& c : cells) EXPECT_LE(c.successes, c.trials);
  const std::string csv = sweep_csv(cells);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Plots, SingleSuccessHasZeroStd) {
  EnvConfig env;
  env.t_max = 20;
  const PlotSeries s = plot_series({fake("x", true, 20, 0.0)}, env);
  ASSERT_EQ(s.t.size(), 20u);
  for (std::size_t k = 0; k < 20; ++k) {
    EXPECT_EQ(s.std_p[k], 0.0);
    EXPECT_DOUBLE_EQ(s.mean_p[k], 0.01 * k);
    EXPECT_DOUBLE_EQ(s.t[k], (k + 1) * env.decision_dt());
  }
}

TEST(Plots, FailedEpisodesExcluded) {
  EnvConfig env;
  env.t_max = 20;
  const PlotSeries s =
      plot_series({fake("x", true, 20, 0.0), fake("x", false, 7, 5.0)}, env);
  for (std::size_t k = 0; k < 20; ++k) EXPECT_EQ(s.std_p[k], 0.0);
  EXPECT_THROW(plot_series({fake("x", false, 7, 5.0)}, env), NoSuccessfulEpisodes);
}

TEST(Plots, ExportWritesOneCsvPerVariant) {
  EnvConfig env;
  env.t_max = 10;
  const auto dir = scratch("plots");
  const auto files = export_plots(
      {fake("ours", true, 10, 0.0), fake("ppo+dr", true, 10, 0.1), fake("lqr", false, 4, 0.0)},
      env, dir);
  ASSERT_EQ(files.size(), 2u);
  EXPECT_TRUE(std::filesystem::exists(dir / "ours_trajectory.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ppo_dr_trajectory.csv"));
  std::ifstream in(dir / "ours_trajectory.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "t,mean_p,std_p,c_pos");
  std::filesystem::remove_all(dir);
}

TEST(Records, RoundTripReproducesSummary) {
  LqrController lqr(WipParams{}, LqrWeights{}, 20.0);
  EvalSpec spec = small_spec(3);
  spec.mu_lo = 0.3;
  const auto recs = evaluate(lqr, spec);
  const auto dir = scratch("records");
  write_records(recs, dir / "records.jsonl");
  const auto back = read_records(dir / "records.jsonl");
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) EXPECT_EQ(to_json(back[i]), to_json(recs[i]));
  EXPECT_EQ(summary_csv({summarize(back)}), summary_csv({summarize(recs)}));
  std::filesystem::remove_all(dir);
}

TEST(Controllers, LoadErrors) {
  EXPECT_THROW(load_controller("/nonexistent/policy.ckpt", EnvConfig{}, LqrWeights{}),
               CheckpointLoad);
  EXPECT_EQ(load_controller("lqr", EnvConfig{}, LqrWeights{})->name(), "lqr");
  EXPECT_THROW(mu_input_mode_from_string("guess"), ConfigInvalid);
}

TEST(Controllers, PolicyFromCheckpoint) {
  Rng rng = make_rng(3, "init");
  const Policy p = Policy::create(Variant::Student, rng, -1.0);
  const auto dir = scratch("ckpt");
  p.to_checkpoint({}).save(dir / "student.ckpt");
  auto c = load_controller((dir / "student.ckpt").string(), EnvConfig{}, LqrWeights{}, "student");
  EXPECT_EQ(c->name(), "student");
  const auto recs = evaluate(*c, small_spec(2));
  EXPECT_EQ(recs.size(), 2u);
  for (const auto& r : recs) EXPECT_TRUE(std::isfinite(r.rms_error));
  std::filesystem::remove_all(dir);
}
