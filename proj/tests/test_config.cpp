// Copyright 2026 The cwdpo Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cwdpo/config.hpp"
#include "cwdpo/errors.hpp"
#include "cwdpo/suite.hpp"

using namespace cwdpo;
namespace fs = std::filesystem;

namespace {

const char* kMinimal =
    "[run]\n"
    "seed = 3\n"
    "[stage1]\n"
    "objective = sft-c\n"
    "[stage2]\n"
    "objective = cw-dpo\n";

std::string tiny_text(const std::string& extra = "") {
  return std::string(
             "[run]\nseed = 1\ndynamics = false\n"
             "[data]\ncorpus_size = 120\nprobe_size = 12\nheldout_pool = 24\n"
             "[train]\nbatch_size = 8\nprobe_interval = 5\ncheckpoint_interval = 5\n"
             "[stage1]\nobjective = sft-c\nsteps = 10\n"
             "[stage2]\nobjective = cw-dpo\nsteps = 10\n") +
         extra;
}

fs::path scratch(const char* name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("minimal config parses with defaults") {
  const auto c = parse_config(kMinimal);
  CHECK(c.training.seed == 3);
  CHECK(c.data.seed == 3);
  CHECK(c.training.sft.lambda == 0.1);
  CHECK(c.training.sft.threshold == 4.0);
  CHECK(c.training.preference.dpo.beta == 0.1);
  CHECK(c.training.preference.cooling.floor == -3.0);
  CHECK(c.ablations.empty());
}

TEST_CASE("echo round-trips") {
  auto c = parse_config(kMinimal);
  c.ablations = {parse_ablation("fixed-cooling-weight=0.7")};
  c.training.preference.cooling.fixed_weight = 0.25;
  c.data.tier_weights = {0.1, 0.2, 0.7};
  c.training.stage2_learning_rate = 0.1 + 0.2;
  c.out = "/tmp/somewhere";
  const auto text = format_config(c);
  const auto back = parse_config(text);
  CHECK(format_config(back) == text);
  CHECK(back.training.stage2_learning_rate == c.training.stage2_learning_rate);
  CHECK(back.ablations == c.ablations);
  CHECK(back.training.preference.cooling.fixed_weight == 0.25);
}

TEST_CASE("missing required field names the field") {
  try {
    parse_config("[run]\nseed = 1\n[stage1]\nobjective = sft\n");
    FAIL("expected an error");
  } catch (const ConfigParseError& e) {
    CHECK(std::string(e.what()).find("stage2.objective") != std::string::npos);
  }
}

TEST_CASE("errors are anchored to their line") {
  auto line_of = [](const std::string& text) -> std::size_t {
    try {
      parse_config(text);
    } catch (const ConfigParseError& e) {
      return e.line();
    }
    return 0;
  };
  CHECK(line_of(std::string(kMinimal) + "[stage2]\nbeta = abc\n") == 8);
  CHECK(line_of(std::string(kMinimal) + "bogus = 1\n") == 7);
  CHECK(line_of(std::string(kMinimal) + "[nope]\n") == 7);
  CHECK(line_of(std::string(kMinimal) + "just text\n") == 7);
  CHECK(line_of("[run]\nseed = 1\nseed = 2\n") == 3);
  CHECK(line_of(std::string(kMinimal) + "[stage1]\npenalty = cubic\n") == 8);
}

TEST_CASE("invalid values are rejected") {
  CHECK_THROWS_AS(parse_config(std::string(kMinimal) + "[stage2]\ntemperature = 0\n"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(std::string(kMinimal) + "[stage1]\nlearning_rate = -1\n"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(std::string(kMinimal) + "[data]\nprobe_size = 9999\n"),
                  ConfigError);
}

TEST_CASE("ablations: parsing, exclusivity, effect") {
  CHECK(parse_ablation("fixed-cooling-weight").value == 1.0);
  CHECK(parse_ablation("fixed-cooling-weight=0.7").value == 0.7);
  CHECK_THROWS_AS(parse_ablation("fixed-cooling-weight=2"), ConfigError);
  CHECK_THROWS_AS(parse_ablation("no-cw-dpo=1"), ConfigError);
  CHECK_THROWS_AS(parse_ablation("w/o-everything"), ConfigError);
  CHECK_THROWS_AS(parse_config(std::string(kMinimal) +
                               "[run]\nablations = no-cw-dpo, fixed-cooling-weight\n"),
                  ConfigError);
  CHECK_THROWS_AS(check_ablations({parse_ablation("hard-constraint"),
                                   parse_ablation("hard-constraint")}),
                  ConfigError);

  const TrainingConfig base;
  auto t = apply_ablations(base, {parse_ablation("no-smooth-sft")});
  CHECK(t.stage1_steps == 0);
  t = apply_ablations(base, {parse_ablation("no-negative-sampling")});
  CHECK(t.stage1_objective == Stage1Objective::sft);
  t = apply_ablations(base, {parse_ablation("hard-constraint")});
  CHECK(t.sft.mode == PenaltyMode::hard_constraint);
  t = apply_ablations(base, {parse_ablation("no-cw-dpo")});
  CHECK(t.stage2_steps == 0);
  t = apply_ablations(base, {parse_ablation("fixed-cooling-weight=0.7")});
  CHECK(t.preference.cooling.fixed_weight == 0.7);
  auto filtered = base;
  filtered.preference.cooling.hard_filter = true;
  t = apply_ablations(filtered, {parse_ablation("no-negative-filtering")});
  CHECK_FALSE(t.preference.cooling.hard_filter);
}

TEST_CASE("run, compare and dynamics on a small bundle") {
  const auto dir = scratch("cwdpo_suite_test");
  const auto cfg = parse_config(tiny_text());
  run_experiment(cfg, dir / "a");
  CHECK(fs::exists(dir / "a" / "timing.json"));
  CHECK_FALSE(fs::exists(dir / "a" / "dynamics"));

  // echoed config re-parses to the same config
  std::ifstream is(dir / "a" / "config.ini");
  std::stringstream ss;
  ss << is.rdbuf();
  const auto echoed = parse_config(ss.str());
  CHECK(format_config(echoed) == ss.str());

  run_experiment(cfg, dir / "b");
  std::ifstream sa(dir / "a" / "summary.json"), sb(dir / "b" / "summary.json");
  std::stringstream ta, tb;
  ta << sa.rdbuf();
  tb << sb.rdbuf();
  CHECK(ta.str() == tb.str());

  const auto self = compare_runs(dir / "a", dir / "a");
  REQUIRE_FALSE(self.series.empty());
  std::stringstream csv;
  write_compare_csv(csv, self);
  std::string header, row;
  std::getline(csv, header);
  CHECK(header.find("entropy_delta") != std::string::npos);
  while (std::getline(csv, row)) {
    std::stringstream fields(row);
    std::string f;
    int col = 0;
    while (std::getline(fields, f, ',')) {
      if (col >= 2 && (col - 2) % 3 == 2) CHECK(std::stod(f) == 0.0);
      ++col;
    }
  }

  DynamicsOptions opt;
  opt.pairs = 3;
  opt.eta_sweep = true;
  opt.sweep_levels = 3;
  const auto rep = run_dynamics_suite(dir / "a", opt);
  CHECK(rep.verification.size() == 3);
  CHECK(rep.halving.size() == 9);
  CHECK(rep.median_relative_error <= 0.05);
  CHECK(rep.max_profile_ratio_error <= 1e-10);
  CHECK(fs::exists(dir / "a" / "dynamics" / "halving.csv"));

  auto other = parse_config(tiny_text());
  other.data.probe_size = 10;
  run_experiment(other, dir / "c");
  CHECK_THROWS_AS(compare_runs(dir / "a", dir / "c"), ComparisonError);

  fs::remove_all(dir / "a" / "checkpoints");
  CHECK_THROWS_AS(run_dynamics_suite(dir / "a", opt), InputError);
  fs::remove_all(dir);
}

TEST_CASE("dynamics refuses adam bundles") {
  const auto dir = scratch("cwdpo_adam_test");
  auto cfg = parse_config(tiny_text());
  cfg.training.optimizer = OptimizerKind::adam;
  cfg.training.stage1_learning_rate = 0.01;
  cfg.training.stage2_learning_rate = 0.01;
  run_experiment(cfg, dir);
  CHECK_THROWS_AS(run_dynamics_suite(dir, {}), CapabilityError);
  fs::remove_all(dir);
}

TEST_CASE("grid runs the baseline and every variant") {
  const auto dir = scratch("cwdpo_grid_test");
  auto cfg = parse_config(tiny_text());
  cfg.grid = {parse_ablation("no-cw-dpo"), parse_ablation("fixed-cooling-weight=0.7")};
  run_experiment(cfg, dir);
  CHECK(fs::exists(dir / "baseline" / "summary.json"));
  CHECK(fs::exists(dir / "no-cw-dpo" / "summary.json"));
  CHECK(fs::exists(dir / "fixed-cooling-weight_0.7" / "summary.json"));
  fs::remove_all(dir);
}
