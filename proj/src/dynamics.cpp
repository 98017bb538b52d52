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

#include "cwdpo/dynamics.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>

#include "cwdpo/errors.hpp"

namespace cwdpo {

std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::sft: return "sft";
    case LossKind::dpo: return "dpo";
    case LossKind::cw_dpo: return "cw-dpo";
  }
  return "?";
}

LossKind parse_loss_kind(std::string_view s) {
  if (s == "sft") return LossKind::sft;
  if (s == "dpo") return LossKind::dpo;
  if (s == "cw-dpo") return LossKind::cw_dpo;
  throw ConfigError("unknown loss kind '" + std::string(s) + "'");
}

UpdateResidual loss_residual(const PolicyParameters& params, const PreferencePair& u,
                             const LossSpec& spec) {
  UpdateResidual out{u.context, {u.winner}, {}, {}, 0.0};
  if (spec.kind == LossKind::sft) {
    const SequenceScore s = score_sequence(params, u.context, u.winner);
    out.residual.assign(s.probs.size(), 0.0);
    s.add_logprob_logit_grad(-1.0, out.residual);
    out.gradient.assign(params.size(), 0.0);
    backward(params, s.trace, out.residual, out.gradient);
    out.loss = -s.sum_log_prob;
    return out;
  }
  if (!spec.reference) throw InputError("preference loss needs a reference snapshot");
  PreferenceResult r = spec.kind == LossKind::dpo
                           ? dpo_loss(params, *spec.reference, u, spec.dpo)
                           : cw_dpo_loss(params, *spec.reference, u, spec.dpo, spec.cooling);
  out.targets.push_back(u.loser);
  out.residual = std::move(r.residual.total_winner);
  out.residual.insert(out.residual.end(), r.residual.total_loser.begin(),
                      r.residual.total_loser.end());
  out.gradient = std::move(r.gradient);
  out.loss = r.breakdown.loss;
  return out;
}

std::vector<double> belief_geometry(const PolicyParameters& params, const TokenSequence& context,
                                    const TokenSequence& target) {
  const SequenceScore s = score_sequence(params, context, target);
  std::vector<double> a(s.probs.size(), 0.0);
  s.add_logprob_logit_grad(1.0 / static_cast<double>(s.length()), a);
  return a;
}

Eigen::MatrixXd stacked_jacobian(const PolicyParameters& params, const TokenSequence& context,
                                 std::span<const TokenSequence> targets) {
  std::vector<Eigen::MatrixXd> blocks;
  Eigen::Index rows = 0;
  for (const auto& t : targets) {
    blocks.push_back(logit_jacobian(params, context, t));
    rows += blocks.back().rows();
  }
  Eigen::MatrixXd j(rows, static_cast<Eigen::Index>(params.size()));
  Eigen::Index r = 0;
  for (const auto& b : blocks) {
    j.middleRows(r, b.rows()) = b;
    r += b.rows();
  }
  return j;
}

Eigen::MatrixXd entk_block(const PolicyParameters& params, const ObservingSample& o,
                           const TokenSequence& u_context,
                           std::span<const TokenSequence> u_targets) {
  const TokenSequence ot[] = {o.target};
  const Eigen::MatrixXd jo = stacked_jacobian(params, o.context, ot);
  const Eigen::MatrixXd ju = stacked_jacobian(params, u_context, u_targets);
  return jo * ju.transpose();
}

double matrix_free_contraction(const PolicyParameters& params, const ObservingSample& o,
                               std::span<const double> a, const UpdateResidual& u) {
  const ForwardTrace trace = forward(params, o.context, o.target);
  if (a.size() != trace.logits.values.size())
    throw InputError("belief vector does not match the observing sample");
  std::vector<double> vo(params.size(), 0.0);
  backward(params, trace, a, vo);
  double dot = 0.0;
  for (std::size_t i = 0; i < vo.size(); ++i) dot += vo[i] * u.gradient[i];
  return dot;
}

double dense_contraction(const Eigen::MatrixXd& k, std::span<const double> a,
                         std::span<const double> g) {
  if (static_cast<Eigen::Index>(a.size()) != k.rows() ||
      static_cast<Eigen::Index>(g.size()) != k.cols())
    throw InputError("contraction shapes do not match the kernel");
  const Eigen::Map<const Eigen::VectorXd> av(a.data(), k.rows());
  const Eigen::Map<const Eigen::VectorXd> gv(g.data(), k.cols());
  return av.dot(k * gv);
}

double InfluenceBreakdown::relative_error() const {
  return std::abs(actual - predicted) / (std::abs(actual) + 1e-12);
}

PolicyParameters scratch_update(const PolicyParameters& params, const PreferencePair& u,
                                const LossSpec& spec, double eta) {
  const UpdateResidual r = loss_residual(params, u, spec);
  PolicyParameters next = params;
  auto v = next.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= eta * r.gradient[i];
  return next;
}

InfluenceBreakdown predict_influence(const PolicyParameters& params, const PreferencePair& u,
                                     const ObservingSample& o, const LossSpec& spec, double eta,
                                     ContractionMode mode) {
  if (!(eta > 0.0)) throw ConfigError("eta must be > 0");
  InfluenceBreakdown out;
  out.eta = eta;
  out.belief = belief_geometry(params, o.context, o.target);
  const UpdateResidual r = loss_residual(params, u, spec);
  out.residual = r.residual;
  double contraction = 0.0;
  if (mode == ContractionMode::dense) {
    out.kernel = entk_block(params, o, r.context, r.targets);
    contraction = dense_contraction(*out.kernel, out.belief, out.residual);
  } else {
    contraction = matrix_free_contraction(params, o, out.belief, r);
  }
  out.predicted = -eta * contraction;

  PolicyParameters next = params;
  auto v = next.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= eta * r.gradient[i];
  out.actual = avg_token_log_prob(next, o.context, o.target) -
               avg_token_log_prob(params, o.context, o.target);
  return out;
}

namespace {

double sq_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace

std::vector<ComponentNorms> track_component_norms(std::span<const CheckpointView> checkpoints,
                                                  std::span<const ProbePair> pairs,
                                                  const LossSpec& spec, double eta) {
  if (checkpoints.size() < 2) throw InputError("component norms need at least two checkpoints");
  std::vector<ComponentNorms> out;
  for (const auto& c : checkpoints) {
    const PolicyParameters& p = *c.params;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& pp = pairs[i];
      const ObservingSample o{pp.observing.context, pp.observing.winner};
      ComponentNorms n;
      n.step = c.step;
      n.pair = i;

      const UpdateResidual ru = loss_residual(p, pp.updating, spec);
      const UpdateResidual ro = loss_residual(p, pp.observing, spec);
      const auto a = belief_geometry(p, o.context, o.target);
      n.belief_sq = sq_norm(a);
      n.residual_sq = sq_norm(ro.residual);

      const Eigen::MatrixXd k = entk_block(p, o, ru.context, ru.targets);
      n.lb_kuo = std::sqrt(n.belief_sq) * k.norm() * std::sqrt(sq_norm(ru.residual));
      n.predicted = -eta * dense_contraction(k, a, ru.residual);

      PolicyParameters next = p;
      auto v = next.values();
      for (std::size_t j = 0; j < v.size(); ++j) v[j] -= eta * ru.gradient[j];
      const SequenceScore before = score_sequence(p, o.context, o.target);
      const SequenceScore after = score_sequence(next, o.context, o.target);
      for (std::size_t l = 0; l < before.length(); ++l) {
        const double d = after.token_log_probs[l] - before.token_log_probs[l];
        n.delta_log_prob_sq += d * d;
      }
      n.actual = after.avg_log_prob() - before.avg_log_prob();
      out.push_back(n);
    }
  }
  return out;
}

void write_component_norms_csv(std::ostream& os, std::span<const ComponentNorms> rows) {
  os << "step,pair,delta_log_prob_sq,belief_sq,residual_sq,lb_kuo,predicted,actual\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.pair,
                  r.delta_log_prob_sq, r.belief_sq, r.residual_sq, r.lb_kuo, r.predicted,
                  r.actual);
    os << buf;
  }
}

std::vector<double> moving_average(std::span<const double> x, std::size_t window) {
  if (window < 1) throw ConfigError("moving average window must be >= 1");
  std::vector<double> out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sum += x[i];
    if (i >= window) sum -= x[i - window];
    out[i] = sum / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

std::vector<ProfileRow> regularization_profile(const PolicyParameters& params,
                                               const ReferenceSnapshot& ref,
                                               const PreferencePair& pair, const DpoConfig& dpo,
                                               const CoolingConfig& cooling, std::size_t points) {
  if (points < 2) throw ConfigError("profile needs at least two grid points");
  cooling.validate();
  CoolingConfig sig = cooling;
  sig.fixed_weight.reset();
  sig.hard_filter = false;
  const PreferenceResult vanilla = dpo_loss(params, ref, pair, dpo);
  const double vf = vanilla.residual.scale;

  std::vector<ProfileRow> rows;
  const double lo = cooling.floor - 5.0 * cooling.temperature;
  const double hi = cooling.floor + 5.0 * cooling.temperature;
  for (std::size_t i = 0; i < points; ++i) {
    ProfileRow row;
    row.avg_log_prob = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    row.cooling_weight = cooling_weight(row.avg_log_prob, sig);
    CoolingConfig fixed = sig;
    fixed.fixed_weight = row.cooling_weight;
    const PreferenceResult cooled = cw_dpo_loss(params, ref, pair, dpo, fixed);
    row.vanilla_factor = vf;
    row.cooled_factor = row.cooling_weight * cooled.residual.scale;
    row.factor_ratio = row.cooled_factor / row.vanilla_factor;
    row.vanilla_loser_grad_norm = vanilla.breakdown.loser_grad_norm;
    row.cooled_loser_grad_norm = cooled.breakdown.loser_grad_norm;
    rows.push_back(row);
  }
  return rows;
}

void write_profile_csv(std::ostream& os, std::span<const ProfileRow> rows) {
  os << "avg_log_prob,cooling_weight,vanilla_factor,cooled_factor,factor_ratio,"
        "vanilla_loser_grad_norm,cooled_loser_grad_norm\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.avg_log_prob,
                  r.cooling_weight, r.vanilla_factor, r.cooled_factor, r.factor_ratio,
                  r.vanilla_loser_grad_norm, r.cooled_loser_grad_norm);
    os << buf;
  }
}

}  // namespace cwdpo
