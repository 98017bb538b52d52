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

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cwdpo/data.hpp"
#include "cwdpo/trainer.hpp"

namespace cwdpo {

enum class AblationKind {
  no_smooth_sft,          // skip Stage 1, preference-tune the initial policy
  no_negative_sampling,   // Stage 1 is plain SFT
  hard_constraint,        // Stage-1 penalty replaced by a hard constraint
  no_cw_dpo,              // skip Stage 2
  fixed_cooling_weight,   // w_c held at `value`
  no_negative_filtering,  // train on every negative, however easy
};

struct Ablation {
  AblationKind kind;
  std::optional<double> value;
  friend bool operator==(const Ablation&, const Ablation&) = default;
};

std::string_view to_string(AblationKind k);
/// "name" or "name=value". Throws ConfigError.
Ablation parse_ablation(std::string_view s);
std::string format_ablation(const Ablation& a);

/// Throws ConfigError when two ablations conflict or one is repeated.
void check_ablations(const std::vector<Ablation>& list);

/// Returns `cfg` with the ablations applied.
TrainingConfig apply_ablations(TrainingConfig cfg, const std::vector<Ablation>& list);

struct ExperimentConfig {
  DatasetSpec data;
  TrainingConfig training;
  std::vector<Ablation> ablations;
  /// Variants run by the grid after the unablated baseline, one ablation each.
  std::vector<Ablation> grid;
  std::optional<std::filesystem::path> out;
  bool dynamics = true;  // run the dynamics suite on the bundle after training
  std::size_t dynamics_pairs = 4;

  /// Overrides the seed used for data, initialization and sampling.
  void set_seed(std::uint64_t seed);
  /// The effective training config (ablations applied).
  TrainingConfig resolved() const;
  void validate() const;
};

/// Parse failure anchored at a line of the source text (line 0 means the
/// whole file, e.g. a missing required key).
class ConfigParseError : public ConfigError {
 public:
  ConfigParseError(std::size_t line, const std::string& msg)
      : ConfigError(line ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// INI-style text: `[section]` headers, `key = value` lines, `#` or `;`
/// comments. Required keys: run.seed, stage1.objective, stage2.objective.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Complete echo of every key; parse_config(format_config(c)) reproduces c.
std::string format_config(const ExperimentConfig& c);

}  // namespace cwdpo
