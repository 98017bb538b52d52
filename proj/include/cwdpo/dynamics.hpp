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

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cwdpo/data.hpp"
#include "cwdpo/objectives.hpp"
#include "cwdpo/policy.hpp"

namespace cwdpo {

// Sign convention used throughout this module:
//   A = d l_bar / dz on the observing sample = (1/L) (onehot(y) - softmax(z))
//   G = d loss / dz on the updating sample (NLL-gradient convention)
//   theta' = theta - eta J_u^T G, so  delta l_bar ~= -eta <A, J_o J_u^T G>.

/// Observing sample: the response whose l_bar is measured.
struct ObservingSample {
  TokenSequence context;
  TokenSequence target;
};

enum class LossKind { sft, dpo, cw_dpo };
std::string_view to_string(LossKind k);
LossKind parse_loss_kind(std::string_view s);

/// The loss applied on the updating sample. SFT uses the pair's winner only;
/// the preference losses need a reference.
struct LossSpec {
  LossKind kind = LossKind::sft;
  DpoConfig dpo;
  CoolingConfig cooling;
  const ReferenceSnapshot* reference = nullptr;
};

/// Logit blocks of the updating sample (one for SFT, winner then loser for
/// the preference losses), the residual G over them, and the parameter
/// gradient J_u^T G.
struct UpdateResidual {
  TokenSequence context;
  std::vector<TokenSequence> targets;
  std::vector<double> residual;
  std::vector<double> gradient;
  double loss = 0.0;
};

UpdateResidual loss_residual(const PolicyParameters& params, const PreferencePair& u,
                             const LossSpec& spec);

/// d l_bar(y | x) / dz, layout (position, vocab).
std::vector<double> belief_geometry(const PolicyParameters& params, const TokenSequence& context,
                                    const TokenSequence& target);

/// Dense Jacobian of stacked logit blocks.
Eigen::MatrixXd stacked_jacobian(const PolicyParameters& params, const TokenSequence& context,
                                 std::span<const TokenSequence> targets);

/// K = J_o J_u^T, shape (L_o V) x (sum L_u V). Throws CapabilityError when
/// a Jacobian exceeds the dense cap.
Eigen::MatrixXd entk_block(const PolicyParameters& params, const ObservingSample& o,
                           const TokenSequence& u_context,
                           std::span<const TokenSequence> u_targets);

/// <J_o^T A, J_u^T G> via two reverse passes; no size cap.
double matrix_free_contraction(const PolicyParameters& params, const ObservingSample& o,
                               std::span<const double> a, const UpdateResidual& u);

/// A^T K G with K materialized.
double dense_contraction(const Eigen::MatrixXd& k, std::span<const double> a,
                         std::span<const double> g);

enum class ContractionMode { dense, matrix_free };

struct InfluenceBreakdown {
  std::vector<double> belief;  // A
  std::optional<Eigen::MatrixXd> kernel;  // K (dense mode only)
  std::vector<double> residual;  // G
  double predicted = 0.0;
  double actual = 0.0;
  double eta = 0.0;

  double relative_error() const;
};

/// Predicted delta l_bar on o from one plain gradient step of size eta on u,
/// and the actual change measured on a scratch copy.
InfluenceBreakdown predict_influence(const PolicyParameters& params, const PreferencePair& u,
                                     const ObservingSample& o, const LossSpec& spec, double eta,
                                     ContractionMode mode = ContractionMode::matrix_free);

/// One plain gradient step of size eta on u.
PolicyParameters scratch_update(const PolicyParameters& params, const PreferencePair& u,
                                const LossSpec& spec, double eta);

/// A (updating, observing) pair of preference pairs tracked across
/// checkpoints. The observing sample is the observing pair's winner.
struct ProbePair {
  PreferencePair updating;
  PreferencePair observing;
};

struct ComponentNorms {
  std::size_t step = 0;
  std::size_t pair = 0;
  double delta_log_prob_sq = 0.0;  // |log pi'(y_o) - log pi(y_o)|^2 per position
  double belief_sq = 0.0;          // |A_o|^2
  double residual_sq = 0.0;        // |G_o|^2, loss residual on the observing pair
  double lb_kuo = 0.0;             // |A_o| |K_uo|_F |G_u|
  double predicted = 0.0;
  double actual = 0.0;
};

struct CheckpointView {
  std::size_t step = 0;
  const PolicyParameters* params = nullptr;
};

/// Throws InputError with fewer than two checkpoints.
std::vector<ComponentNorms> track_component_norms(std::span<const CheckpointView> checkpoints,
                                                  std::span<const ProbePair> pairs,
                                                  const LossSpec& spec, double eta);

/// CSV: step,pair,delta_log_prob_sq,belief_sq,residual_sq,lb_kuo,predicted,actual
void write_component_norms_csv(std::ostream& os, std::span<const ComponentNorms> rows);

/// Trailing moving average with the given window (shorter at the start).
std::vector<double> moving_average(std::span<const double> x, std::size_t window);

struct ProfileRow {
  double avg_log_prob = 0.0;  // grid value of l_bar(y_l)
  double cooling_weight = 0.0;
  double vanilla_factor = 0.0;  // beta (1 - a)
  double cooled_factor = 0.0;   // w_c beta (1 - a')
  double factor_ratio = 0.0;    // cooled / vanilla
  double vanilla_loser_grad_norm = 0.0;
  double cooled_loser_grad_norm = 0.0;
};

/// Evaluates both losses on the real pair (its actual Delta_w, Delta_l) with
/// w_c fixed to cooling_weight(grid value) at `points` evenly spaced values
/// over [floor - 5 tau, floor + 5 tau].
std::vector<ProfileRow> regularization_profile(const PolicyParameters& params,
                                               const ReferenceSnapshot& ref,
                                               const PreferencePair& pair, const DpoConfig& dpo,
                                               const CoolingConfig& cooling,
                                               std::size_t points = 41);

void write_profile_csv(std::ostream& os, std::span<const ProfileRow> rows);

}  // namespace cwdpo
