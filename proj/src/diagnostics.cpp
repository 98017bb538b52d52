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

#include "cwdpo/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "cwdpo/errors.hpp"

namespace cwdpo {

namespace {

void check_distributions(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty())
    throw InputError("distributions must have the same non-empty support");
  const double sp = std::accumulate(p.begin(), p.end(), 0.0);
  const double sq = std::accumulate(q.begin(), q.end(), 0.0);
  if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
    throw InputError("distributions must sum to 1");
}

double tv_unchecked(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

double js_unchecked(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) s += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) s += 0.5 * q[i] * std::log(q[i] / m);
  }
  return std::clamp(s, 0.0, std::log(2.0));
}

std::vector<double> positive_probs(const PolicyParameters& params, const LabeledExample& ex) {
  return score_sequence(params, ex.context, ex.positive).probs;
}

}  // namespace

double tv_distance(std::span<const double> p, std::span<const double> q) {
  check_distributions(p, q);
  return tv_unchecked(p, q);
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  check_distributions(p, q);
  return js_unchecked(p, q);
}

CalibrationBins CalibrationBins::collect(std::span<const Prediction> predictions, int bins) {
  if (bins < 1) throw ConfigError("calibration needs at least one bin");
  CalibrationBins cb;
  cb.bins = bins;
  cb.confidence_sum.assign(bins, 0.0);
  cb.accuracy_sum.assign(bins, 0.0);
  cb.count.assign(bins, 0);
  for (const auto& p : predictions) {
    if (!(p.confidence >= 0.0 && p.confidence <= 1.0))
      throw InputError("confidence outside [0, 1]");
    const int b = std::min(bins - 1, static_cast<int>(p.confidence * bins));
    cb.confidence_sum[b] += p.confidence;
    cb.accuracy_sum[b] += p.correct ? 1.0 : 0.0;
    ++cb.count[b];
  }
  return cb;
}

std::size_t CalibrationBins::total() const {
  return std::accumulate(count.begin(), count.end(), std::size_t{0});
}

double CalibrationBins::ece() const {
  const double n = static_cast<double>(total());
  if (n == 0.0) throw InputError("ECE of an empty prediction list");
  double e = 0.0;
  for (int b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double nb = static_cast<double>(count[b]);
    e += (nb / n) * std::abs(accuracy_sum[b] / nb - confidence_sum[b] / nb);
  }
  return e;
}

double expected_calibration_error(std::span<const Prediction> predictions, int bins) {
  if (predictions.empty()) throw InputError("ECE of an empty prediction list");
  return CalibrationBins::collect(predictions, bins).ece();
}

DeltaLogProb delta_logp_probe(const PolicyParameters& current, const PolicyParameters& baseline,
                              std::span<const LabeledExample> probe) {
  return ProbeEvaluator(probe, baseline).report(current, 0, 0).delta_logp;
}

DistributionShift distribution_shift_report(const PolicyParameters& a, const PolicyParameters& b,
                                            std::span<const LabeledExample> probe) {
  if (!(a.arch() == b.arch())) throw InputError("checkpoints have different architectures");
  if (probe.empty()) throw InputError("empty probe set");
  DistributionShift out;
  std::size_t positions = 0;
  const std::size_t v = a.arch().vocab;
  for (const auto& ex : probe) {
    const auto pa = positive_probs(a, ex);
    const auto pb = positive_probs(b, ex);
    for (std::size_t l = 0; l < ex.positive.size(); ++l) {
      std::span<const double> ra{pa.data() + l * v, v}, rb{pb.data() + l * v, v};
      out.tv += tv_unchecked(ra, rb);
      out.js += js_unchecked(ra, rb);
      ++positions;
    }
  }
  out.tv /= static_cast<double>(positions);
  out.js /= static_cast<double>(positions);
  return out;
}

void ProbeReport::check_ranges(int vocab) const {
  const double tol = 1e-9;
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::logic_error(std::string("probe report out of range: ") + what);
  };
  require(entropy >= -tol && entropy <= std::log(static_cast<double>(vocab)) + tol, "entropy");
  require(tv >= -tol && tv <= 1.0 + tol, "tv");
  require(js >= -tol && js <= std::log(2.0) + tol, "js");
  require(ece >= -tol && ece <= 1.0 + tol, "ece");
  require(top1_mass >= -tol && top1_mass <= 1.0 + tol, "top1_mass");
  require(positive_avg_logp <= tol, "positive_avg_logp");
}

ProbeEvaluator::ProbeEvaluator(std::span<const LabeledExample> probe,
                               const PolicyParameters& baseline)
    : probe_(probe) {
  if (probe.empty()) throw InputError("empty probe set");
  for (const auto& ex : probe) {
    auto s = score_sequence(baseline, ex.context, ex.positive);
    baseline_positive_.push_back(s.avg_log_prob());
    baseline_probs_.push_back(std::move(s.probs));
    std::vector<double> neg;
    for (const auto& n : ex.negatives)
      neg.push_back(avg_token_log_prob(baseline, ex.context, n.tokens));
    baseline_negative_.push_back(std::move(neg));
  }
}

ProbeReport ProbeEvaluator::report(const PolicyParameters& current, int stage,
                                   std::size_t step) const {
  ProbeReport r;
  r.stage = stage;
  r.step = step;
  const std::size_t v = current.arch().vocab;
  std::size_t positions = 0;
  std::vector<Prediction> predictions;
  std::array<double, 3> neg_sum{};
  std::array<std::size_t, 3> neg_count{};

  for (std::size_t i = 0; i < probe_.size(); ++i) {
    const auto& ex = probe_[i];
    const auto s = score_sequence(current, ex.context, ex.positive);
    const double avg = s.avg_log_prob();
    r.positive_avg_logp += avg;
    r.delta_logp.positives += avg - baseline_positive_[i];
    for (std::size_t l = 0; l < s.length(); ++l) {
      std::span<const double> p{s.probs.data() + l * v, v};
      std::span<const double> q{baseline_probs_[i].data() + l * v, v};
      r.entropy += shannon_entropy(p);
      const auto top = std::max_element(p.begin(), p.end());
      r.top1_mass += *top;
      predictions.push_back({std::min(1.0, *top), (top - p.begin()) == ex.positive[l]});
      r.tv += tv_unchecked(p, q);
      r.js += js_unchecked(p, q);
      ++positions;
    }
    for (std::size_t k = 0; k < ex.negatives.size(); ++k) {
      const auto& n = ex.negatives[k];
      const double d = avg_token_log_prob(current, ex.context, n.tokens) - baseline_negative_[i][k];
      neg_sum[tier_index(n.tier.tier)] += d;
      ++neg_count[tier_index(n.tier.tier)];
    }
  }
  const double np = static_cast<double>(positions);
  const double ne = static_cast<double>(probe_.size());
  r.entropy /= np;
  r.top1_mass /= np;
  r.tv /= np;
  r.js /= np;
  r.positive_avg_logp /= ne;
  r.delta_logp.positives /= ne;
  for (std::size_t t = 0; t < 3; ++t)
    r.delta_logp.negatives[t] = neg_count[t] ? neg_sum[t] / static_cast<double>(neg_count[t])
                                             : std::numeric_limits<double>::quiet_NaN();
  r.ece = expected_calibration_error(predictions);
  return r;
}

namespace {

nlohmann::json nan_as_null(double x) {
  return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x);
}

double null_as_nan(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

std::string to_json_line(const ProbeReport& r) {
  nlohmann::ordered_json j;
  j["stage"] = r.stage;
  j["step"] = r.step;
  j["entropy"] = r.entropy;
  j["positive_avg_logp"] = r.positive_avg_logp;
  j["delta_logp_positive"] = r.delta_logp.positives;
  j["delta_logp_negative"] = {{"easy", nan_as_null(r.delta_logp.negatives[0])},
                              {"medium", nan_as_null(r.delta_logp.negatives[1])},
                              {"hard", nan_as_null(r.delta_logp.negatives[2])}};
  j["tv"] = r.tv;
  j["js"] = r.js;
  j["ece"] = r.ece;
  j["top1_mass"] = r.top1_mass;
  return j.dump();
}

ProbeReport probe_report_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    ProbeReport r;
    r.stage = j.at("stage").get<int>();
    r.step = j.at("step").get<std::size_t>();
    r.entropy = j.at("entropy").get<double>();
    r.positive_avg_logp = j.at("positive_avg_logp").get<double>();
    r.delta_logp.positives = j.at("delta_logp_positive").get<double>();
    const auto& n = j.at("delta_logp_negative");
    r.delta_logp.negatives = {null_as_nan(n.at("easy")), null_as_nan(n.at("medium")),
                              null_as_nan(n.at("hard"))};
    r.tv = j.at("tv").get<double>();
    r.js = j.at("js").get<double>();
    r.ece = j.at("ece").get<double>();
    r.top1_mass = j.at("top1_mass").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("bad probe report: ") + e.what());
  }
}

std::vector<ProbeReport> read_probe_reports(std::istream& is) {
  std::vector<ProbeReport> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(probe_report_from_json(line));
  return out;
}

std::vector<DistributionSnapshot> top_k_snapshots(const PolicyParameters& params,
                                                  std::span<const LabeledExample> probe,
                                                  std::span<const std::size_t> example_ids,
                                                  std::size_t k) {
  const std::size_t v = params.arch().vocab;
  k = std::min(k, v);
  std::vector<DistributionSnapshot> out;
  std::vector<Token> order(v);
  for (std::size_t id : example_ids) {
    if (id >= probe.size()) throw InputError("snapshot example id out of range");
    const auto& ex = probe[id];
    const auto probs = positive_probs(params, ex);
    for (std::size_t l = 0; l < ex.positive.size(); ++l) {
      DistributionSnapshot snap{id, l, {}, {probs.begin() + l * v, probs.begin() + (l + 1) * v}};
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Token a, Token b) {
        return snap.distribution[a] != snap.distribution[b]
                   ? snap.distribution[a] > snap.distribution[b]
                   : a < b;
      });
      for (std::size_t r = 0; r < k; ++r)
        snap.top.emplace_back(order[r], snap.distribution[order[r]]);
      out.push_back(std::move(snap));
    }
  }
  return out;
}

void write_snapshots_csv(std::ostream& os, std::span<const DistributionSnapshot> snaps) {
  os << "example_id,position,rank,token,probability\n";
  char buf[64];
  for (const auto& s : snaps)
    for (std::size_t r = 0; r < s.top.size(); ++r) {
      std::snprintf(buf, sizeof buf, "%.17g", s.top[r].second);
      os << s.example_id << ',' << s.position << ',' << r + 1 << ',' << s.top[r].first << ','
         << buf << '\n';
    }
}

CurriculumTrace cooling_weight_trace(std::span<const CurriculumSample> samples) {
  CurriculumTrace t;
  std::size_t i = 0;
  while (i < samples.size()) {
    const std::size_t step = samples[i].step;
    if (!t.steps.empty() && step < t.steps.back())
      throw InputError("curriculum samples are not ordered by step");
    std::array<double, 3> sum{};
    std::array<std::size_t, 3> n{};
    for (; i < samples.size() && samples[i].step == step; ++i) {
      sum[tier_index(samples[i].tier)] += samples[i].cooling_weight;
      ++n[tier_index(samples[i].tier)];
    }
    t.steps.push_back(step);
    for (std::size_t k = 0; k < 3; ++k) {
      const double mean =
          n[k] ? sum[k] / static_cast<double>(n[k]) : std::numeric_limits<double>::quiet_NaN();
      t.mean_weight[k].push_back(mean);
      if (!t.time_to_half[k] && n[k] && mean < 0.5) t.time_to_half[k] = step;
    }
  }
  return t;
}

void write_curriculum_csv(std::ostream& os, std::span<const CurriculumSample> samples) {
  os << "step,fixture,tier,negative,avg_log_prob,cooling_weight\n";
  char a[64], w[64];
  for (const auto& s : samples) {
    std::snprintf(a, sizeof a, "%.17g", s.avg_log_prob);
    std::snprintf(w, sizeof w, "%.17g", s.cooling_weight);
    os << s.step << ',' << s.fixture << ',' << to_string(s.tier) << ',' << s.negative << ','
       << a << ',' << w << '\n';
  }
}

std::vector<CurriculumSample> read_curriculum_csv(std::istream& is) {
  std::vector<CurriculumSample> out;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string step, fixture, tier, neg, avg, w;
    std::getline(ss, step, ',');
    std::getline(ss, fixture, ',');
    std::getline(ss, tier, ',');
    std::getline(ss, neg, ',');
    std::getline(ss, avg, ',');
    std::getline(ss, w, ',');
    out.push_back({std::stoul(step), std::stoul(fixture), parse_tier(tier), std::stoul(neg),
                   std::stod(avg), std::stod(w)});
  }
  return out;
}

}  // namespace cwdpo
