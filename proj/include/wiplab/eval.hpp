#pragma once

// Evaluation harness: seeded paired episodes, friction sweeps, summaries,
// result persistence and plot-data export. Every controller sees
// deployment-mode observations only.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wiplab/env.hpp"
#include "wiplab/lqr.hpp"
#include "wiplab/ppo.hpp"

namespace wiplab {

struct TrajectoryPoint {
  double t = 0.0;
  double p = 0.0;
  double c_pos = 0.0;
  double beta = 0.0;
  double action = 0.0;
};

struct RunRecord {
  std::string variant;
  std::uint64_t seed = 0;
  int episode = 0;
  double mu_actual = 0.0;
  double mu_input = 0.0;
  double target = 0.0;
  int length = 0;  // decision steps
  bool success = false;
  double rms_error = 0.0;  // m, over the steps actually run
  double max_abs_beta = 0.0;
  double slip_distance = 0.0;  // m
  std::vector<TrajectoryPoint> trajectory;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord record_from_json(const nlohmann::json& j);

class Controller {
 public:
  virtual ~Controller() = default;
  virtual std::string name() const = 0;
  virtual void reset() {}
  // Wheel velocity command for a deployment-mode observation whose friction
  // slot holds the friction input of this episode.
  virtual double act(const Observation& obs) = 0;
};

class PolicyController : public Controller {
 public:
  explicit PolicyController(Policy policy, std::string name = {});
  std::string name() const override { return name_; }
  void reset() override;
  double act(const Observation& obs) override;
  const Policy& policy() const { return policy_; }

 private:
  Policy policy_;
  std::string name_;
  ProprioHistory history_;
};

// Position and velocity come from wheel odometry, as on hardware.
class LqrController : public Controller {
 public:
  LqrController(const WipParams& params, const LqrWeights& weights,
                double v_max);
  std::string name() const override { return "lqr"; }
  double act(const Observation& obs) override;
  const LqrGains& gains() const { return gains_; }

 private:
  WipParams params_;
  LqrGains gains_;
  double v_max_;
};

// "lqr" or a checkpoint path. Throws CheckpointLoad.
std::unique_ptr<Controller> load_controller(const std::string& source,
                                            const EnvConfig& env,
                                            const LqrWeights& weights,
                                            const std::string& name = {});

enum class MuInputMode { Truth, Noisy, Fixed };

struct MuInput {
  MuInputMode mode = MuInputMode::Truth;
  double value = 1.0;  // used by Fixed
};

MuInputMode mu_input_mode_from_string(const std::string& s);
std::string to_string(MuInputMode m);

struct EvalSpec {
  EnvConfig env;
  NoiseModel noise;
  int episodes = 100;
  double mu_lo = 0.5;  // actual friction ~ U(mu_lo, mu_hi); equal bounds fix it
  double mu_hi = 1.5;
  MuInput mu_input;
  std::uint64_t seed = 1;
  bool keep_trajectory = true;
  int workers = 1;
};

// Episode e of a spec: command, initial pitch, friction and its input.
// Depends only on (seed, e), which makes runs paired across controllers.
EpisodeSetup episode_condition(const EvalSpec& spec, int episode);

RunRecord run_episode(Controller& c, const EvalSpec& spec, int episode);
std::vector<RunRecord> evaluate(Controller& c, const EvalSpec& spec);

struct Summary {
  std::string variant;
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
  double mean_error = 0.0;
  double std_error = 0.0;
  double mean_slip = 0.0;
  bool defined = false;  // false for an empty record set
};

Summary summarize(const std::vector<RunRecord>& records,
                  const std::string& variant = {});

struct Comparison {
  std::vector<Summary> rows;
  std::vector<std::vector<RunRecord>> records;  // per controller
};

Comparison compare(const std::vector<Controller*>& controllers,
                   const EvalSpec& spec);

struct SweepSpec {
  std::vector<double> mu_input_grid;
  double mu_actual_lo = 1.0;
  double mu_actual_hi = 1.0;
  int trials = 50;

  void validate() const;
};

struct SweepCell {
  double mu_input = 0.0;
  int trials = 0;
  int successes = 0;
  double success_rate = 0.0;
  double mean_error = 0.0;
  double std_error = 0.0;
};

std::vector<SweepCell> sweep_cof(Controller& c, const SweepSpec& sweep,
                                 const EvalSpec& base,
                                 std::vector<RunRecord>* records = nullptr);

struct PlotSeries {
  std::vector<double> t, mean_p, std_p, c_pos;
};

// Mean and population std of p over successful episodes on the grid
// t_k = (k + 1) * decision_dt, k < t_max. Throws NoSuccessfulEpisodes.
PlotSeries plot_series(const std::vector<RunRecord>& records,
                       const EnvConfig& env);

// One CSV per variant: <dir>/<variant>_trajectory.csv with columns
// t,mean_p,std_p,c_pos. Returns the files written.
std::vector<std::filesystem::path> export_plots(
    const std::vector<RunRecord>& records, const EnvConfig& env,
    const std::filesystem::path& dir);

std::string summary_csv(const std::vector<Summary>& rows);
std::string sweep_csv(const std::vector<SweepCell>& cells);

void write_records(const std::vector<RunRecord>& records,
                   const std::filesystem::path& path);
std::vector<RunRecord> read_records(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace wiplab
