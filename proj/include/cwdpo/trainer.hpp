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

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cwdpo/data.hpp"
#include "cwdpo/diagnostics.hpp"
#include "cwdpo/objectives.hpp"
#include "cwdpo/policy.hpp"

namespace cwdpo {

enum class OptimizerKind { gradient_descent, adam };
std::string_view to_string(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view s);

struct Optimizer {
  OptimizerKind kind = OptimizerKind::gradient_descent;
  double learning_rate = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<double> m, v;
  std::size_t t = 0;

  void step(std::span<double> params, std::span<const double> grad);
};

enum class Stage1Objective { sft, sft_c, label_smoothing };
std::string_view to_string(Stage1Objective o);
Stage1Objective parse_stage1_objective(std::string_view s);

/// Stop when the probe-positive mean delta log p has not improved by more
/// than `min_delta` for `patience` consecutive probes. patience = 0 disables.
struct EarlyStopRule {
  std::size_t patience = 0;
  double min_delta = 1e-4;
};

struct TrainingConfig {
  Architecture arch;
  std::uint64_t seed = 0;
  double init_scale = 0.08;

  OptimizerKind optimizer = OptimizerKind::gradient_descent;
  double stage1_learning_rate = 0.5;
  double stage2_learning_rate = 1.0;
  /// Stage-1 learning rate decays linearly to this fraction at step T1.
  double stage1_lr_end_fraction = 0.05;
  std::size_t batch_size = 32;
  std::size_t stage1_steps = 500;  // T1; 0 skips Stage 1
  std::size_t stage2_steps = 500;  // T2; 0 skips Stage 2

  Stage1Objective stage1_objective = Stage1Objective::sft_c;
  SftConfig sft;
  double label_smoothing = 0.1;
  std::array<double, 3> stage1_tier_weights{0.0, 0.0, 1.0};  // Stage-1 y- tiers

  PreferenceObjective preference;
  EarlyStopRule early_stop;
  std::size_t probe_interval = 25;
  std::size_t trace_interval = 5;
  std::size_t curriculum_fixtures = 8;
  std::size_t checkpoint_interval = 100;

  void validate() const;  // throws ConfigError
};

struct StepLog {
  int stage = 1;
  std::size_t step = 0;  // within the stage, 1-based
  double loss = 0.0;
  double mean_cooling_weight = 1.0;
  double mean_activation = 0.0;
  double mean_delta_w = 0.0;
  double mean_delta_l = 0.0;
  std::array<double, 3> tier_cooling_weight{};  // NaN when the tier is absent
  double negative_nll = 0.0;  // Stage 1: batch mean nats/token on y-
  bool penalty_active = false;
};

struct Checkpoint {
  int stage = 1;
  std::size_t step = 0;
  PolicyParameters params;
};

struct TrainerState {
  TrainingConfig config;
  PolicyParameters params;
  PolicyParameters initial;
  int stage = 1;  // 2 once the reference is snapshotted
  bool stage1_complete = false;
  std::size_t stage1_steps_done = 0;
  std::size_t stage2_steps_done = 0;
  std::optional<ReferenceSnapshot> reference;
  Optimizer optimizer;
  std::vector<StepLog> log;
  std::vector<ProbeReport> probes;
  std::vector<CurriculumSample> curriculum;
  std::vector<Checkpoint> checkpoints;
  bool early_stopped = false;
  std::optional<std::filesystem::path> replay_dir;  // divergence dumps go here

  explicit TrainerState(const TrainingConfig& cfg);
};

struct TrainingData {
  DatasetSpec spec;
  CorpusSplit split;
  std::vector<LabeledExample> probe;
  Grammar grammar;

  explicit TrainingData(const DatasetSpec& s);
};

/// Stage 1 on the Stage-1 corpus split; marks Stage 1 complete.
void run_stage1(TrainerState& state, const TrainingData& data);

/// Freezes the current parameters as the Stage-2 reference and switches the
/// stage marker to 2. Throws ProtocolError before Stage 1 completes or once
/// Stage-2 updates have been made.
void snapshot_reference(TrainerState& state);

/// Stage 2 on the Stage-2 corpus split. Throws ProtocolError without a
/// reference snapshot.
void run_stage2(TrainerState& state, const TrainingData& data);

/// True when the rule says to stop given the Stage-2 probe history.
bool early_stop_check(std::span<const ProbeReport> history, const EarlyStopRule& rule);

struct RunSummary {
  std::string json;  // deterministic (no timings)
};

/// Stage 1, snapshot, Stage 2. Writes the artifact bundle when `out` is set.
TrainerState train_two_stage(const TrainingConfig& cfg, const TrainingData& data,
                             const std::optional<std::filesystem::path>& out = std::nullopt,
                             std::string_view config_echo = {});

/// Writes checkpoints/, steps.csv, probes.jsonl, curriculum.csv,
/// snapshots.csv, and summary.json.
void write_bundle(const std::filesystem::path& out, const TrainerState& state,
                  const TrainingData& data, std::string_view config_echo);

std::string summary_json(const TrainerState& state, const TrainingData& data);

void write_steps_csv(std::ostream& os, std::span<const StepLog> log);

/// Per-example w_c of the curated fixtures' dataset negatives.
std::vector<CurriculumSample> measure_curriculum(const PolicyParameters& params,
                                                 std::span<const LabeledExample> fixtures,
                                                 const CoolingConfig& cooling,
                                                 std::size_t step);

}  // namespace cwdpo
