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
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cwdpo/data.hpp"
#include "cwdpo/policy.hpp"

namespace cwdpo {

/// (1/2) sum |p - q|, in [0, 1].
double tv_distance(std::span<const double> p, std::span<const double> q);

/// (1/2) KL(p || m) + (1/2) KL(q || m), m = (p + q) / 2, in [0, ln 2].
double js_divergence(std::span<const double> p, std::span<const double> q);

struct Prediction {
  double confidence = 0.0;
  bool correct = false;
};

inline constexpr int kDefaultCalibrationBins = 15;

/// Equal-width bins over [0, 1]; bin b holds confidences in [b/n, (b+1)/n),
/// with confidence 1 placed in the last bin.
struct CalibrationBins {
  int bins = kDefaultCalibrationBins;
  std::vector<double> confidence_sum;
  std::vector<double> accuracy_sum;
  std::vector<std::size_t> count;

  static CalibrationBins collect(std::span<const Prediction> predictions,
                                 int bins = kDefaultCalibrationBins);
  std::size_t total() const;
  double ece() const;
};

/// sum_b (n_b / N) |acc_b - conf_b|. Throws InputError on an empty list.
double expected_calibration_error(std::span<const Prediction> predictions,
                                  int bins = kDefaultCalibrationBins);

struct DeltaLogProb {
  double positives = 0.0;
  std::array<double, 3> negatives{};  // easy, medium, hard (NaN when absent)
};

/// Mean of l_bar(current) - l_bar(baseline) over probe positives and, per
/// tier, over probe negatives.
DeltaLogProb delta_logp_probe(const PolicyParameters& current, const PolicyParameters& baseline,
                              std::span<const LabeledExample> probe);

struct DistributionShift {
  double tv = 0.0;
  double js = 0.0;
};

/// Next-token TV / JS at every positive position of every probe example,
/// averaged uniformly.
DistributionShift distribution_shift_report(const PolicyParameters& a, const PolicyParameters& b,
                                            std::span<const LabeledExample> probe);

struct ProbeReport {
  int stage = 1;
  std::size_t step = 0;
  double entropy = 0.0;            // mean next-token entropy on probe positives
  double positive_avg_logp = 0.0;  // mean l_bar(y+) on probe
  DeltaLogProb delta_logp;         // vs baseline checkpoint
  double tv = 0.0;                 // vs baseline checkpoint
  double js = 0.0;
  double ece = 0.0;
  double top1_mass = 0.0;

  /// Throws std::logic_error when a metric is out of its range.
  void check_ranges(int vocab) const;
};

/// Per-position quantities of a baseline checkpoint, computed once and reused
/// for every report against that baseline.
class ProbeEvaluator {
 public:
  ProbeEvaluator(std::span<const LabeledExample> probe, const PolicyParameters& baseline);

  ProbeReport report(const PolicyParameters& current, int stage, std::size_t step) const;
  std::span<const LabeledExample> probe() const { return probe_; }

 private:
  std::span<const LabeledExample> probe_;
  std::vector<std::vector<double>> baseline_probs_;  // per example, L x V
  std::vector<double> baseline_positive_;            // l_bar(y+)
  std::vector<std::vector<double>> baseline_negative_;
};

std::string to_json_line(const ProbeReport& r);
ProbeReport probe_report_from_json(const std::string& line);
std::vector<ProbeReport> read_probe_reports(std::istream& is);

struct DistributionSnapshot {
  std::size_t example_id = 0;
  std::size_t position = 0;
  std::vector<std::pair<Token, double>> top;  // non-increasing probability
  std::vector<double> distribution;
};

std::vector<DistributionSnapshot> top_k_snapshots(const PolicyParameters& params,
                                                  std::span<const LabeledExample> probe,
                                                  std::span<const std::size_t> example_ids,
                                                  std::size_t k = 5);

/// CSV: example_id,position,rank,token,probability
void write_snapshots_csv(std::ostream& os, std::span<const DistributionSnapshot> snaps);

/// One w_c measurement of one curated negative at one Stage-2 step.
struct CurriculumSample {
  std::size_t step = 0;
  std::size_t fixture = 0;
  Tier tier = Tier::easy;
  std::size_t negative = 0;
  double avg_log_prob = 0.0;
  double cooling_weight = 0.0;
};

struct CurriculumTrace {
  std::vector<std::size_t> steps;
  std::array<std::vector<double>, 3> mean_weight;             // per tier, aligned with steps
  std::array<std::optional<std::size_t>, 3> time_to_half{};  // first step with mean < 0.5
};

/// Aggregates raw samples into per-tier mean w_c series. Samples must be
/// grouped by non-decreasing step.
CurriculumTrace cooling_weight_trace(std::span<const CurriculumSample> samples);

/// CSV: step,fixture,tier,negative,avg_log_prob,cooling_weight
void write_curriculum_csv(std::ostream& os, std::span<const CurriculumSample> samples);
std::vector<CurriculumSample> read_curriculum_csv(std::istream& is);

}  // namespace cwdpo
