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

#include "cwdpo/objectives.hpp"

#include <cmath>
#include <string>

#include "cwdpo/errors.hpp"

namespace cwdpo {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double neg_log_sigmoid(double x) {
  // -log sigma(x) = log(1 + exp(-x))
  return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::string_view to_string(PenaltyMode m) {
  switch (m) {
    case PenaltyMode::batch_relu: return "batch-relu";
    case PenaltyMode::per_sample_relu: return "per-sample-relu";
    case PenaltyMode::hard_constraint: return "hard-constraint";
  }
  return "?";
}

PenaltyMode parse_penalty_mode(std::string_view s) {
  if (s == "batch-relu") return PenaltyMode::batch_relu;
  if (s == "per-sample-relu") return PenaltyMode::per_sample_relu;
  if (s == "hard-constraint") return PenaltyMode::hard_constraint;
  throw ConfigError("unknown penalty mode '" + std::string(s) + "'");
}

std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::dpo: return "dpo";
    case Objective::cw_dpo: return "cw-dpo";
    case Objective::focal_dpo: return "focal-dpo";
  }
  return "?";
}

Objective parse_objective(std::string_view s) {
  if (s == "dpo") return Objective::dpo;
  if (s == "cw-dpo") return Objective::cw_dpo;
  if (s == "focal-dpo") return Objective::focal_dpo;
  throw ConfigError("unknown objective '" + std::string(s) + "'");
}

void SftConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("sft: lambda must be >= 0");
  if (!(threshold >= 0.0)) throw ConfigError("sft: threshold C must be >= 0");
}

void DpoConfig::validate() const {
  if (!(beta > 0.0)) throw ConfigError("dpo: beta must be > 0");
}

void CoolingConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("cooling: temperature must be > 0");
  if (fixed_weight && !(*fixed_weight >= 0.0 && *fixed_weight <= 1.0))
    throw ConfigError("cooling: fixed weight must be in [0, 1]");
}

double cooling_weight(double avg_log_prob, const CoolingConfig& cfg) {
  if (cfg.fixed_weight) return *cfg.fixed_weight;
  if (!(cfg.temperature > 0.0)) throw ConfigError("cooling: temperature must be > 0");
  return sigmoid((avg_log_prob - cfg.floor) / cfg.temperature);
}

LossAndGradient sft_loss(const PolicyParameters& params, std::span<const SupervisedPair> batch) {
  if (batch.empty()) throw InputError("sft_loss: empty batch");
  LossAndGradient out;
  out.gradient.assign(params.size(), 0.0);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::vector<double> dz;
  for (const auto& ex : batch) {
    const SequenceScore s = score_sequence(params, ex.context, ex.target);
    out.loss -= s.sum_log_prob * inv_b;
    dz.assign(s.probs.size(), 0.0);
    s.add_logprob_logit_grad(-inv_b, dz);
    backward(params, s.trace, dz, out.gradient);
  }
  return out;
}

SftCResult sft_c_loss(const PolicyParameters& params, std::span<const ConstrainedExample> batch,
                      const SftConfig& cfg) {
  if (batch.empty()) throw InputError("sft_c_loss: empty batch");
  cfg.validate();
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  SftCResult out;
  out.gradient.assign(params.size(), 0.0);
  std::vector<SequenceScore> neg_scores;
  neg_scores.reserve(batch.size());
  for (const auto& ex : batch) {
    neg_scores.push_back(score_sequence(params, ex.context, ex.negative));
    out.negative_nll -= neg_scores.back().avg_log_prob() * inv_b;
  }

  const bool violated = cfg.threshold - out.negative_nll > 0.0;
  const bool hard_restore = cfg.mode == PenaltyMode::hard_constraint && violated;

  std::vector<double> dz;
  for (const auto& ex : batch) {
    const SequenceScore s = score_sequence(params, ex.context, ex.positive);
    out.positive_nll -= s.sum_log_prob * inv_b;
    if (hard_restore) continue;
    dz.assign(s.probs.size(), 0.0);
    s.add_logprob_logit_grad(-inv_b, dz);
    backward(params, s.trace, dz, out.gradient);
  }
  out.loss = out.positive_nll;

  // d NLL_i / dz = -(1/L_i) d log pi / dz, and the penalty decreases in NLL_i.
  auto push_negative = [&](std::size_t i, double weight) {
    const SequenceScore& s = neg_scores[i];
    dz.assign(s.probs.size(), 0.0);
    s.add_logprob_logit_grad(weight * inv_b / static_cast<double>(s.length()), dz);
    backward(params, s.trace, dz, out.gradient);
  };

  switch (cfg.mode) {
    case PenaltyMode::batch_relu:
      if (violated) {
        out.penalty_active = true;
        out.loss += cfg.lambda * (cfg.threshold - out.negative_nll);
        if (cfg.lambda != 0.0)
          for (std::size_t i = 0; i < batch.size(); ++i) push_negative(i, cfg.lambda);
      }
      break;
    case PenaltyMode::per_sample_relu:
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const double gap = cfg.threshold + neg_scores[i].avg_log_prob();
        if (gap <= 0.0) continue;
        out.penalty_active = true;
        out.loss += cfg.lambda * gap * inv_b;
        if (cfg.lambda != 0.0) push_negative(i, cfg.lambda);
      }
      break;
    case PenaltyMode::hard_constraint:
      if (violated) {
        out.penalty_active = true;
        for (std::size_t i = 0; i < batch.size(); ++i) push_negative(i, 1.0);
      }
      break;
  }
  return out;
}

LossAndGradient label_smoothing_sft_loss(const PolicyParameters& params,
                                         std::span<const SupervisedPair> batch, double epsilon) {
  if (batch.empty()) throw InputError("label_smoothing_sft_loss: empty batch");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("label smoothing: eps must be in [0, 1)");
  const std::size_t v = params.arch().vocab;
  const double off = epsilon / static_cast<double>(v - 1);
  const double on = 1.0 - epsilon;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  LossAndGradient out;
  out.gradient.assign(params.size(), 0.0);
  std::vector<double> dz;
  for (const auto& ex : batch) {
    const SequenceScore s = score_sequence(params, ex.context, ex.target);
    dz.assign(s.probs.size(), 0.0);
    for (std::size_t l = 0; l < s.length(); ++l) {
      const Token gold = ex.target[l];
      for (std::size_t r = 0; r < v; ++r) {
        const double q = static_cast<Token>(r) == gold ? on : off;
        const double p = s.probs[l * v + r];
        if (q > 0.0) out.loss -= inv_b * q * std::log(p);
        dz[l * v + r] = inv_b * (p - q);
      }
    }
    backward(params, s.trace, dz, out.gradient);
  }
  return out;
}

namespace {

struct PairScores {
  SequenceScore winner;
  SequenceScore loser;
  double delta_w = 0.0;
  double delta_l = 0.0;
};

PairScores score_pair(const PolicyParameters& params, const ReferenceSnapshot& ref,
                      const PreferencePair& pair) {
  if (pair.winner == pair.loser) throw InputError("preference pair has identical winner and loser");
  PairScores s{score_sequence(params, pair.context, pair.winner),
               score_sequence(params, pair.context, pair.loser)};
  s.delta_w = s.winner.sum_log_prob - sequence_log_prob(ref.params(), pair.context, pair.winner);
  s.delta_l = s.loser.sum_log_prob - sequence_log_prob(ref.params(), pair.context, pair.loser);
  return s;
}

std::vector<double> nll_logit_grad(const SequenceScore& s) {
  std::vector<double> g(s.probs.size(), 0.0);
  s.add_logprob_logit_grad(-1.0, g);
  return g;
}

// Builds the residual and parameter gradient for a loss of the margin
// m = beta (dw - weight * dl), given coeff = -dL/dm. `extra_loser` is an
// additional multiple of the loser NLL gradient (differentiating through w_c).
PreferenceResult assemble(const PolicyParameters& params, const PairScores& s, double beta,
                          double weight, double loss, double activation, double coeff,
                          double extra_loser) {
  PreferenceResult r;
  auto& b = r.breakdown;
  b.loss = loss;
  b.delta_w = s.delta_w;
  b.delta_l = s.delta_l;
  b.beta = beta;
  b.activation = activation;
  b.cooling_weight = weight;
  b.loser_avg_log_prob = s.loser.avg_log_prob();

  auto& res = r.residual;
  res.scale = beta * coeff;
  res.cooling_weight = weight;
  res.winner_component = nll_logit_grad(s.winner);
  res.loser_component = nll_logit_grad(s.loser);
  res.cooled_loser_component.resize(res.loser_component.size());
  res.total_winner.resize(res.winner_component.size());
  res.total_loser.resize(res.loser_component.size());
  for (std::size_t i = 0; i < res.winner_component.size(); ++i)
    res.total_winner[i] = res.scale * res.winner_component[i];
  for (std::size_t i = 0; i < res.loser_component.size(); ++i) {
    res.cooled_loser_component[i] = weight * res.loser_component[i];
    res.total_loser[i] = -res.scale * res.cooled_loser_component[i];
    if (extra_loser != 0.0) res.total_loser[i] += extra_loser * res.loser_component[i];
  }

  std::vector<double> gw(params.size(), 0.0), gl(params.size(), 0.0);
  backward(params, s.winner.trace, res.total_winner, gw);
  backward(params, s.loser.trace, res.total_loser, gl);
  b.winner_grad_norm = l2_norm(gw);
  b.loser_grad_norm = l2_norm(gl);
  r.gradient = std::move(gw);
  for (std::size_t i = 0; i < gl.size(); ++i) r.gradient[i] += gl[i];
  return r;
}

PreferenceResult sigmoid_preference(const PolicyParameters& params, const PairScores& s,
                                    double beta, double weight, double extra_loser_per_coeff) {
  const double m = beta * (s.delta_w - weight * s.delta_l);
  const double a = sigmoid(m);
  const double one_minus_a = sigmoid(-m);
  return assemble(params, s, beta, weight, neg_log_sigmoid(m), a, one_minus_a,
                  extra_loser_per_coeff * one_minus_a);
}

}  // namespace

PreferenceResult dpo_loss(const PolicyParameters& params, const ReferenceSnapshot& ref,
                          const PreferencePair& pair, const DpoConfig& cfg) {
  cfg.validate();
  return sigmoid_preference(params, score_pair(params, ref, pair), cfg.beta, 1.0, 0.0);
}

PreferenceResult cw_dpo_loss(const PolicyParameters& params, const ReferenceSnapshot& ref,
                             const PreferencePair& pair, const DpoConfig& dpo,
                             const CoolingConfig& cool) {
  dpo.validate();
  cool.validate();
  const PairScores s = score_pair(params, ref, pair);
  const double avg = s.loser.avg_log_prob();
  const double wc = cooling_weight(avg, cool);

  double extra = 0.0;
  if (!cool.stop_gradient && !cool.fixed_weight) {
    // dL/dw_c = (1 - a') beta dl and dw_c/dz_l = w_c (1 - w_c) / (tau L) (onehot - pi),
    // i.e. a negative multiple of the loser NLL gradient.
    const double len = static_cast<double>(s.loser.length());
    extra = -dpo.beta * s.delta_l * wc * (1.0 - wc) / (cool.temperature * len);
  }
  PreferenceResult r = sigmoid_preference(params, s, dpo.beta, wc, extra);
  if (cool.hard_filter && avg < cool.floor) {
    r.breakdown.filtered = true;
    r.breakdown.winner_grad_norm = r.breakdown.loser_grad_norm = 0.0;
    std::fill(r.gradient.begin(), r.gradient.end(), 0.0);
    std::fill(r.residual.total_winner.begin(), r.residual.total_winner.end(), 0.0);
    std::fill(r.residual.total_loser.begin(), r.residual.total_loser.end(), 0.0);
  }
  return r;
}

PreferenceResult focal_dpo_loss(const PolicyParameters& params, const ReferenceSnapshot& ref,
                                const PreferencePair& pair, double beta, double gamma) {
  DpoConfig{beta}.validate();
  if (!(gamma >= 0.0)) throw ConfigError("focal: gamma must be >= 0");
  const PairScores s = score_pair(params, ref, pair);
  const double m = beta * (s.delta_w - s.delta_l);
  const double a = sigmoid(m);
  const double one_minus_a = sigmoid(-m);
  const double base = neg_log_sigmoid(m);
  const double modulator = std::pow(one_minus_a, gamma);
  // L = (1-a)^g * base;  -dL/dm = g a (1-a)^g base + (1-a)^(g+1)
  const double coeff = gamma * a * modulator * base + modulator * one_minus_a;
  return assemble(params, s, beta, 1.0, modulator * base, a, coeff, 0.0);
}

PreferenceResult preference_loss(const PolicyParameters& params, const ReferenceSnapshot& ref,
                                 const PreferencePair& pair, const PreferenceObjective& obj) {
  switch (obj.kind) {
    case Objective::dpo: return dpo_loss(params, ref, pair, obj.dpo);
    case Objective::cw_dpo: return cw_dpo_loss(params, ref, pair, obj.dpo, obj.cooling);
    case Objective::focal_dpo:
      return focal_dpo_loss(params, ref, pair, obj.dpo.beta, obj.focal_gamma);
  }
  throw ConfigError("unknown objective");
}

BatchPreferenceResult preference_batch_loss(const PolicyParameters& params,
                                            const ReferenceSnapshot& ref,
                                            std::span<const PreferencePair> batch,
                                            const PreferenceObjective& obj) {
  if (batch.empty()) throw InputError("preference_batch_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  BatchPreferenceResult out;
  out.gradient.assign(params.size(), 0.0);
  out.pairs.reserve(batch.size());
  for (const auto& pair : batch) {
    PreferenceResult r = preference_loss(params, ref, pair, obj);
    out.loss += r.breakdown.loss * inv_b;
    for (std::size_t i = 0; i < out.gradient.size(); ++i) out.gradient[i] += r.gradient[i] * inv_b;
    out.pairs.push_back(r.breakdown);
  }
  return out;
}

}  // namespace cwdpo
