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

#include <cmath>
#include <sstream>

#include "cwdpo/diagnostics.hpp"
#include "cwdpo/errors.hpp"
#include "oracles.hpp"

using namespace cwdpo;

namespace {

std::vector<double> random_dist(Rng& rng, int n) {
  std::vector<double> p(n);
  double s = 0.0;
  for (auto& v : p) s += (v = rng.uniform() + 1e-3);
  for (auto& v : p) v /= s;
  return p;
}

double direct_js(const std::vector<double>& p, const std::vector<double>& q) {
  double h_m = 0.0, h_p = 0.0, h_q = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (m > 0) h_m -= m * std::log(m);
    if (p[i] > 0) h_p -= p[i] * std::log(p[i]);
    if (q[i] > 0) h_q -= q[i] * std::log(q[i]);
  }
  return h_m - 0.5 * (h_p + h_q);
}

double brute_ece(const std::vector<Prediction>& preds, int bins) {
  double total = 0.0;
  for (int b = 0; b < bins; ++b) {
    const double lo = static_cast<double>(b) / bins, hi = static_cast<double>(b + 1) / bins;
    double conf = 0.0, acc = 0.0;
    int n = 0;
    for (const auto& p : preds) {
      const bool in = (p.confidence >= lo && p.confidence < hi) ||
                      (b == bins - 1 && p.confidence == 1.0);
      if (!in) continue;
      ++n;
      conf += p.confidence;
      acc += p.correct;
    }
    if (n) total += std::abs(acc / n - conf / n) * n / preds.size();
  }
  return total;
}

DatasetSpec probe_spec() {
  DatasetSpec s;
  s.corpus_size = 100;
  s.probe_size = 16;
  s.heldout_pool = 32;
  return s;
}

}  // namespace

TEST_CASE("TV and JS against direct formulas") {
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const auto p = random_dist(rng, 7), q = random_dist(rng, 7);
    double tv = 0.0;
    for (int k = 0; k < 7; ++k) tv += 0.5 * std::abs(p[k] - q[k]);
    CHECK(tv_distance(p, q) == doctest::Approx(tv).epsilon(1e-14));
    CHECK(js_divergence(p, q) == doctest::Approx(direct_js(p, q)).epsilon(1e-12));
    CHECK(js_divergence(p, q) == doctest::Approx(js_divergence(q, p)).epsilon(1e-14));
    CHECK(js_divergence(p, q) <= std::log(2.0));
  }
  const std::vector<double> a{1, 0}, b{0, 1};
  CHECK(tv_distance(a, b) == 1.0);
  CHECK(js_divergence(a, b) == doctest::Approx(std::log(2.0)));
  CHECK(tv_distance(a, a) == 0.0);
  CHECK(js_divergence(a, a) == 0.0);
}

TEST_CASE("TV / JS reject mismatched or unnormalized inputs") {
  const std::vector<double> a{0.5, 0.5}, b{0.2, 0.3, 0.5}, c{0.9, 0.3};
  CHECK_THROWS_AS(tv_distance(a, b), InputError);
  CHECK_THROWS_AS(js_divergence(a, c), InputError);
}

TEST_CASE("ECE matches a brute-force binning") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Prediction> preds;
    for (int i = 0; i < 200; ++i) {
      const double c = trial == 0 && i % 10 == 0 ? 1.0 : rng.uniform();
      preds.push_back({c, rng.bernoulli(c * 0.8)});
    }
    for (int bins : {1, 10, 15})
      CHECK(expected_calibration_error(preds, bins) ==
            doctest::Approx(brute_ece(preds, bins)).epsilon(1e-12));
    const auto cb = CalibrationBins::collect(preds);
    CHECK(cb.total() == preds.size());
  }
  CHECK_THROWS_AS(expected_calibration_error({}), InputError);
  std::vector<Prediction> perfect(10, Prediction{1.0, true});
  CHECK(expected_calibration_error(perfect) == 0.0);
}

TEST_CASE("probe report: identity baseline gives zero shift") {
  const auto spec = probe_spec();
  const auto probe = build_probe_set(spec);
  Architecture arch;
  const auto p = PolicyParameters::random(arch, 1, 0.3);
  const ProbeEvaluator eval(probe, p);
  const auto r = eval.report(p, 1, 0);
  CHECK(r.tv == 0.0);
  CHECK(r.js == 0.0);
  CHECK(r.delta_logp.positives == 0.0);
  r.check_ranges(arch.vocab);
  CHECK(r.entropy <= std::log(32.0));
  CHECK(r.top1_mass >= 1.0 / 32);
}

TEST_CASE("probe report matches direct per-position recomputation") {
  const auto spec = probe_spec();
  const auto probe = build_probe_set(spec);
  Architecture arch;
  const auto a = PolicyParameters::random(arch, 1, 0.3);
  const auto b = PolicyParameters::random(arch, 2, 0.3);
  const auto r = ProbeEvaluator(probe, a).report(b, 2, 7);
  double tv = 0, js = 0, ent = 0, top = 0, n = 0, pos = 0;
  std::vector<Prediction> preds;
  for (const auto& ex : probe) {
    const auto za = oracle::naive_logits(a, ex.context, ex.positive);
    const auto zb = oracle::naive_logits(b, ex.context, ex.positive);
    for (std::size_t l = 0; l < ex.positive.size(); ++l) {
      const auto pa = softmax(za[l]), pb = softmax(zb[l]);
      tv += tv_distance(pb, pa);
      js += direct_js(pb, pa);
      ent += shannon_entropy(pb);
      const auto it = std::max_element(pb.begin(), pb.end());
      top += *it;
      preds.push_back({*it, (it - pb.begin()) == ex.positive[l]});
      ++n;
    }
    pos += oracle::naive_avg_log_prob(b, ex.context, ex.positive);
  }
  CHECK(r.stage == 2);
  CHECK(r.step == 7);
  CHECK(r.tv == doctest::Approx(tv / n).epsilon(1e-10));
  CHECK(r.js == doctest::Approx(js / n).epsilon(1e-10));
  CHECK(r.entropy == doctest::Approx(ent / n).epsilon(1e-10));
  CHECK(r.top1_mass == doctest::Approx(top / n).epsilon(1e-10));
  CHECK(r.ece == doctest::Approx(brute_ece(preds, 15)).epsilon(1e-10));
  CHECK(r.positive_avg_logp == doctest::Approx(pos / probe.size()).epsilon(1e-10));
}

TEST_CASE("probe reports round-trip through JSON lines") {
  ProbeReport r;
  r.stage = 2;
  r.step = 125;
  r.entropy = 0.6931;
  r.positive_avg_logp = -0.8;
  r.delta_logp.positives = 0.01;
  r.delta_logp.negatives = {-3.0, std::nan(""), -0.5};
  r.tv = 0.1;
  r.js = 0.02;
  r.ece = 0.05;
  r.top1_mass = 0.51;
  std::stringstream ss;
  ss << to_json_line(r) << '\n' << to_json_line(r) << '\n';
  const auto back = read_probe_reports(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[0].step == 125);
  CHECK(back[0].entropy == r.entropy);
  CHECK(std::isnan(back[0].delta_logp.negatives[1]));
  CHECK(back[0].delta_logp.negatives[2] == -0.5);
  CHECK_THROWS(probe_report_from_json("{not json"));
}

TEST_CASE("top-k snapshots are sorted and sum below one") {
  const auto probe = build_probe_set(probe_spec());
  Architecture arch;
  const auto p = PolicyParameters::random(arch, 1, 0.5);
  const std::vector<std::size_t> ids{0, 3};
  const auto snaps = top_k_snapshots(p, probe, ids, 4);
  CHECK(snaps.size() == probe[0].positive.size() + probe[3].positive.size());
  for (const auto& s : snaps) {
    REQUIRE(s.top.size() == 4);
    double sum = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
      sum += s.top[k].second;
      if (k) CHECK(s.top[k - 1].second >= s.top[k].second);
    }
    CHECK(sum <= 1.0 + 1e-12);
  }
  std::stringstream ss;
  write_snapshots_csv(ss, snaps);
  std::string header;
  std::getline(ss, header);
  CHECK(header == "example_id,position,rank,token,probability");
}

TEST_CASE("curriculum trace: per-tier means and time to half weight") {
  std::vector<CurriculumSample> s;
  // easy starts below 0.5; medium crosses at step 10; hard never does
  for (std::size_t step : {0u, 5u, 10u, 15u}) {
    s.push_back({step, 0, Tier::easy, 0, -9.0, 0.2});
    s.push_back({step, 0, Tier::medium, 0, -3.0, step >= 10 ? 0.3 : 0.7});
    s.push_back({step, 1, Tier::medium, 0, -3.0, step >= 10 ? 0.4 : 0.6});
    s.push_back({step, 0, Tier::hard, 0, -1.0, 0.9});
  }
  const auto t = cooling_weight_trace(s);
  CHECK(t.steps.size() == 4);
  CHECK(t.time_to_half[0] == 0u);
  CHECK(t.time_to_half[1] == 10u);
  CHECK_FALSE(t.time_to_half[2].has_value());
  CHECK(t.mean_weight[1][0] == doctest::Approx(0.65));
  std::stringstream ss;
  write_curriculum_csv(ss, s);
  const auto back = read_curriculum_csv(ss);
  REQUIRE(back.size() == s.size());
  CHECK(back[5].cooling_weight == s[5].cooling_weight);
  CHECK(back[5].tier == s[5].tier);
}

TEST_CASE("delta log p probe has NaN for absent tiers") {
  auto probe = build_probe_set(probe_spec());
  for (auto& ex : probe) {
    std::erase_if(ex.negatives, [](const Negative& n) { return n.tier.tier == Tier::medium; });
  }
  Architecture arch;
  const auto a = PolicyParameters::random(arch, 1, 0.3);
  const auto b = PolicyParameters::random(arch, 2, 0.3);
  const auto d = delta_logp_probe(b, a, probe);
  CHECK(std::isnan(d.negatives[1]));
  CHECK(std::isfinite(d.negatives[0]));
  double want = 0.0;
  for (const auto& ex : probe)
    want += oracle::naive_avg_log_prob(b, ex.context, ex.positive) -
            oracle::naive_avg_log_prob(a, ex.context, ex.positive);
  CHECK(d.positives == doctest::Approx(want / probe.size()).epsilon(1e-10));
}
