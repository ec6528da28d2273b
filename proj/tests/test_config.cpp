#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "wiplab/config.hpp"
#include "wiplab/errors.hpp"

using namespace wiplab;
using nlohmann::json;

namespace {

std::filesystem::path write_tmp(const std::string& name, const std::string& text) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const json j = to_json(RunConfig{});
  EXPECT_EQ(to_json(config_from_json(j)), j);
  EXPECT_EQ(j["ppo"]["num_envs"], 64);
  EXPECT_EQ(j["env"]["t_max"], 1000);
  EXPECT_EQ(j["lqr"]["q_diag"], json::array({10.0, 1.0, 50.0, 1.0}));
  EXPECT_EQ(j["variant"], "ours");
}

TEST(Config, ShippedDefaultFileMatchesBuiltins) {
  const auto path = std::filesystem::path(WIPLAB_FIXTURES).parent_path() / "config" / "default.json";
  EXPECT_EQ(to_json(load_config(path)), to_json(RunConfig{}));
}

TEST(Config, CommentsAndPartialFiles) {
  const auto p = write_tmp("wiplab_cfg_partial.json", R"({
    // only what differs from the defaults
    "seed": 7,
    "ppo": { "iterations": 12 /* short run */ },
    "variant": "ppo+dr"
  })");
  const RunConfig c = load_config(p);
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.train.ppo.iterations, 12);
  EXPECT_EQ(c.train.variant, Variant::PpoDr);
  EXPECT_EQ(c.train.ppo.num_envs, 64);
  std::filesystem::remove(p);
}

TEST(Config, RejectsUnknownKeysAndBadTypes) {
  json j = to_json(RunConfig{});
  j["ppo"]["learning_rate"] = 1e-3;
  EXPECT_THROW(config_from_json(j), ConfigInvalid);
  j = to_json(RunConfig{});
  j["ppo"]["lr"] = "fast";
  EXPECT_THROW(config_from_json(j), ConfigInvalid);
  j = to_json(RunConfig{});
  j["ppo"]["gamma"] = 1.5;
  EXPECT_THROW(config_from_json(j), ConfigInvalid);
  j = to_json(RunConfig{});
  j["variant"] = "dqn";
  EXPECT_THROW(config_from_json(j), ConfigInvalid);
}

TEST(Config, Overrides) {
  const RunConfig c = load_config({}, {"ppo.lr=0.001", "ffv.model=gpt-4o-mini",
                                       "eval.sweep_grid=[0.5,1.0]", "curriculum.enabled=false"});
  EXPECT_EQ(c.train.ppo.lr, 0.001);
  EXPECT_EQ(c.ffv.model, "gpt-4o-mini");
  EXPECT_EQ(c.eval.sweep_grid, (std::vector<double>{0.5, 1.0}));
  EXPECT_FALSE(c.train.curriculum);
  EXPECT_THROW(load_config({}, {"ppo.nope=1"}), ConfigInvalid);
  EXPECT_THROW(load_config({}, {"ppo"}), ConfigInvalid);
  EXPECT_THROW(load_config({}, {"ppo=1"}), ConfigInvalid);
}

TEST(Config, MissingFileNamesThePath) {
  try {
    load_config("/no/such/dir/run.json");
    FAIL();
  } catch (const ConfigInvalid& e) {
    EXPECT_NE(std::string(e.what()).find("/no/such/dir/run.json"), std::string::npos);
  }
  const auto p = write_tmp("wiplab_cfg_bad.json", "{ \"seed\": ");
  EXPECT_THROW(load_config(p), ConfigInvalid);
  std::filesystem::remove(p);
}

TEST(Config, EvalSpecDerivation) {
  const RunConfig c = load_config({}, {"eval.mu_input=fixed", "eval.mu_input_value=0.8",
                                       "eval.episodes=7", "seed=3"});
  const EvalSpec s = c.eval_spec();
  EXPECT_EQ(s.episodes, 7);
  EXPECT_EQ(s.seed, 3u);
  EXPECT_EQ(s.mu_input.mode, MuInputMode::Fixed);
  EXPECT_EQ(s.mu_input.value, 0.8);
  EXPECT_THROW(load_config({}, {"eval.mu_input=oracle"}), ConfigInvalid);
}
