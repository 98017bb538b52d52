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

#include <filesystem>
#include <string>
#include <vector>

#include "cwdpo/config.hpp"
#include "cwdpo/dynamics.hpp"

namespace cwdpo {

/// Trains one configuration into `out` (config echo, bundle, optional
/// dynamics report). Wall-clock timing goes to timing.json, never into
/// summary.json. With a grid, the baseline lands in out/baseline and each
/// variant in out/<ablation name>.
void run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out);

struct VerificationRow {
  std::size_t pair = 0;
  double eta = 0.0;
  double predicted = 0.0;
  double actual = 0.0;
  double relative_error = 0.0;
};

struct HalvingRow {
  std::size_t pair = 0;
  double eta = 0.0;
  double error = 0.0;  // |actual - predicted|
  double ratio = 0.0;  // error(2 eta) / error(eta); NaN on the first row
};

struct DynamicsOptions {
  std::size_t pairs = 4;
  double eta = 1e-4;
  bool eta_sweep = false;
  double sweep_start = 1e-2;
  std::size_t sweep_levels = 5;
};

struct DynamicsReport {
  std::vector<VerificationRow> verification;
  std::vector<HalvingRow> halving;
  std::vector<ComponentNorms> norms;
  std::vector<ProfileRow> profile;
  double median_relative_error = 0.0;
  double median_halving_ratio = 0.0;  // NaN without a sweep
  double max_profile_ratio_error = 0.0;
};

/// (updating, observing) pairs from the Stage-2 split: example i's winner
/// against one of its dataset negatives, observed on example i + n.
std::vector<ProbePair> dynamics_pairs(std::span<const LabeledExample> corpus, std::size_t n);

/// One-step influence check, half-step table, component norms over the bundle's
/// checkpoints, and the regularization profile; writes bundle/dynamics/.
/// Throws CapabilityError for adam bundles or focal objectives and
/// InputError when the bundle has no checkpoints.
DynamicsReport run_dynamics_suite(const std::filesystem::path& bundle,
                                  const DynamicsOptions& options);

struct CompareRow {
  int stage = 1;
  std::size_t step = 0;
  ProbeReport a, b;
};

struct CompareReport {
  std::vector<CompareRow> series;
  ProbeReport final_a, final_b;
};

/// Joins the probe series of two bundles on (stage, step). Throws
/// ComparisonError when the bundles probed different sets.
CompareReport compare_runs(const std::filesystem::path& a, const std::filesystem::path& b);

/// CSV with a/b/delta columns for every probe metric.
void write_compare_csv(std::ostream& os, const CompareReport& r);
std::string compare_summary_json(const CompareReport& r);

}  // namespace cwdpo
