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

#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cwdpo/data.hpp"
#include "cwdpo/policy.hpp"

namespace cwdpo {

double sigmoid(double x);
/// -log sigmoid(x), stable for large |x|.
double neg_log_sigmoid(double x);

struct SupervisedPair {
  TokenSequence context;
  TokenSequence target;
};

struct ConstrainedExample {
  TokenSequence context;
  TokenSequence positive;
  TokenSequence negative;
};

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

/// Batch mean of the summed sequence NLL -log pi(y+|x).
LossAndGradient sft_loss(const PolicyParameters& params, std::span<const SupervisedPair> batch);

enum class PenaltyMode {
  batch_relu,       // lambda * ReLU(C - batch mean of negative NLL)
  per_sample_relu,  // lambda * batch mean of ReLU(C - negative NLL)
  hard_constraint,  // feasibility restoration: while violated, step only on C - NLL-
};

std::string_view to_string(PenaltyMode m);
PenaltyMode parse_penalty_mode(std::string_view s);

/// Negative NLL inside the penalty is per token (nats/token), i.e. -l_bar(y-|x).
struct SftConfig {
  double lambda = 0.1;
  double threshold = 4.0;  // C
  PenaltyMode mode = PenaltyMode::batch_relu;

  void validate() const;
};

struct SftCResult {
  double loss = 0.0;
  std::vector<double> gradient;
  bool penalty_active = false;
  double positive_nll = 0.0;  // batch mean, nats per sequence
  double negative_nll = 0.0;  // batch mean, nats per token
};

SftCResult sft_c_loss(const PolicyParameters& params, std::span<const ConstrainedExample> batch,
                      const SftConfig& cfg);

/// Label-smoothed cross entropy: mass 1-eps on gold, eps/(V-1) elsewhere.
LossAndGradient label_smoothing_sft_loss(const PolicyParameters& params,
                                         std::span<const SupervisedPair> batch, double epsilon);

struct DpoConfig {
  double beta = 0.1;
  void validate() const;
};

struct CoolingConfig {
  double floor = -3.0;       // l_floor, nats/token
  double temperature = 1.0;  // tau
  bool hard_filter = false;  // drop pairs with l_bar(y_l) < floor entirely
  std::optional<double> fixed_weight;
  /// Default treats w_c as a constant in the gradient. Off only for analysis.
  bool stop_gradient = true;

  void validate() const;
};

/// sigma((l_bar - floor) / tau), or the fixed override when set.
double cooling_weight(double avg_log_prob, const CoolingConfig& cfg);

struct LossBreakdown {
  double loss = 0.0;
  double delta_w = 0.0;
  double delta_l = 0.0;
  double beta = 0.0;
  double activation = 0.5;      // a (vanilla) or a' (cooled)
  double cooling_weight = 1.0;  // w_c; 1 for vanilla DPO
  double loser_avg_log_prob = 0.0;
  double winner_grad_norm = 0.0;  // |J_w^T G| in parameter space
  double loser_grad_norm = 0.0;   // |J_l^T G| in parameter space
  bool filtered = false;

  double margin() const { return beta * (delta_w - cooling_weight * delta_l); }
};

/// Logit-space residual of a preference loss, split across the winner and
/// loser logit blocks. Components use the NLL-gradient convention
///   winner_component = softmax(z_w) - onehot(y_w)
///   loser_component  = softmax(z_l) - onehot(y_l)
/// so the vanilla residual is total = scale * (winner, -loser) with
/// scale = beta (1 - a), and the cooled one is scale' * (winner, -w_c loser).
struct LossResidualDecomposition {
  std::vector<double> winner_component;
  std::vector<double> loser_component;
  std::vector<double> cooled_loser_component;
  std::vector<double> total_winner;
  std::vector<double> total_loser;
  double scale = 0.0;
  double cooling_weight = 1.0;
};

struct PreferenceResult {
  LossBreakdown breakdown;
  std::vector<double> gradient;
  LossResidualDecomposition residual;
};

PreferenceResult dpo_loss(const PolicyParameters& params, const ReferenceSnapshot& ref,
                          const PreferencePair& pair, const DpoConfig& cfg);

PreferenceResult cw_dpo_loss(const PolicyParameters& params, const ReferenceSnapshot& ref,
                             const PreferencePair& pair, const DpoConfig& dpo,
                             const CoolingConfig& cool);

/// (1-a)^gamma * (-log a), applied to the whole loss (symmetric baseline).
PreferenceResult focal_dpo_loss(const PolicyParameters& params, const ReferenceSnapshot& ref,
                                const PreferencePair& pair, double beta, double gamma);

enum class Objective { dpo, cw_dpo, focal_dpo };
std::string_view to_string(Objective o);
Objective parse_objective(std::string_view s);

struct PreferenceObjective {
  Objective kind = Objective::cw_dpo;
  DpoConfig dpo;
  CoolingConfig cooling;
  double focal_gamma = 2.0;
};

PreferenceResult preference_loss(const PolicyParameters& params, const ReferenceSnapshot& ref,
                                 const PreferencePair& pair, const PreferenceObjective& obj);

struct BatchPreferenceResult {
  double loss = 0.0;  // mean over pairs
  std::vector<double> gradient;
  std::vector<LossBreakdown> pairs;
};

BatchPreferenceResult preference_batch_loss(const PolicyParameters& params,
                                            const ReferenceSnapshot& ref,
                                            std::span<const PreferencePair> batch,
                                            const PreferenceObjective& obj);

double l2_norm(std::span<const double> v);

}  // namespace cwdpo
