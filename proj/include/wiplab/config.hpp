#pragma once

// Run configuration: JSON with // and /* */ comments. Every field has an
// embedded default; files and --set overrides may only name known keys.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wiplab/eval.hpp"
#include "wiplab/lqr.hpp"
#include "wiplab/ppo.hpp"

namespace wiplab {

struct FfvConfig {
  std::string cache;
  int k = 5;
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4o";
  double timeout_s = 20.0;
  int max_retries = 3;
  double backoff_s = 0.5;
  double mu_max = 2.0;
};

struct EvalConfig {
  int episodes = 100;
  double mu_lo = 0.5;
  double mu_hi = 1.5;
  std::string mu_input = "truth";  // truth | noisy | fixed
  double mu_input_value = 1.0;
  std::vector<double> sweep_grid{0.5, 0.75, 1.0, 1.25, 1.5};
  double sweep_mu_actual = 1.0;
  int sweep_trials = 50;
  bool keep_trajectory = true;
};

struct RunConfig {
  TrainSpec train;
  LqrWeights lqr;
  FfvConfig ffv;
  EvalConfig eval;

  void validate() const;
  // Evaluation spec derived from the env/noise/eval sections.
  EvalSpec eval_spec() const;
};

nlohmann::json to_json(const RunConfig& c);
// Strict: unknown keys and wrong types raise ConfigInvalid.
RunConfig config_from_json(const nlohmann::json& j);

// Defaults overlaid with the file's keys. Throws ConfigInvalid naming the
// path when the file is missing or malformed.
nlohmann::json load_config_json(const std::filesystem::path& path);

// "section.key=value"; value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides = {});

}  // namespace wiplab
