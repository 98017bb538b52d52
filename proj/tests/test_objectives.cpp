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

#include "cwdpo/errors.hpp"
#include "cwdpo/objectives.hpp"
#include "oracles.hpp"

using namespace cwdpo;

namespace {

constexpr int kInstances = 20;
constexpr double kTol = 1e-5;

struct Instance {
  PolicyParameters params;
  ReferenceSnapshot ref;
  PreferencePair pair;
  std::vector<ConstrainedExample> batch;
};

Instance make_instance(int i) {
  Rng rng(1000 + i);
  const auto arch = oracle::small_arch(i % 4 == 0 ? 0 : 6);
  auto p = PolicyParameters::random(arch, 2 * i + 1, 0.6);
  auto r = PolicyParameters::random(arch, 2 * i + 2, 0.6);
  const std::size_t L = 2 + rng.below(5);
  const auto x = oracle::random_sequence(rng, arch.vocab, 1 + rng.below(2));
  const auto w = oracle::random_sequence(rng, arch.vocab, L);
  auto lv = oracle::random_sequence(rng, arch.vocab, L).vec();
  if (lv == w.vec()) lv[0] = (lv[0] + 1) % arch.vocab;
  const TokenSequence l(lv);
  std::vector<ConstrainedExample> batch;
  for (int b = 0; b < 3; ++b)
    batch.push_back({oracle::random_sequence(rng, arch.vocab, 2),
                     oracle::random_sequence(rng, arch.vocab, 2 + rng.below(4)),
                     oracle::random_sequence(rng, arch.vocab, 2 + rng.below(4))});
  return {p, ReferenceSnapshot(r), {x, w, l, {}}, batch};
}

double naive_margin_terms(const PolicyParameters& p, const Instance& in, double* dw, double* dl) {
  const auto& rp = in.ref.params();
  *dw = oracle::naive_sum_log_prob(p, in.pair.context, in.pair.winner) -
        oracle::naive_sum_log_prob(rp, in.pair.context, in.pair.winner);
  *dl = oracle::naive_sum_log_prob(p, in.pair.context, in.pair.loser) -
        oracle::naive_sum_log_prob(rp, in.pair.context, in.pair.loser);
  return oracle::naive_avg_log_prob(p, in.pair.context, in.pair.loser);
}

CoolingConfig cooling(double floor, double tau) {
  CoolingConfig c;
  c.floor = floor;
  c.temperature = tau;
  return c;
}

double naive_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("sft gradient vs finite differences") {
  for (int i = 0; i < kInstances; ++i) {
    const auto in = make_instance(i);
    std::vector<SupervisedPair> batch;
    for (const auto& e : in.batch) batch.push_back({e.context, e.positive});
    auto f = [&](const PolicyParameters& q) {
      double s = 0.0;
      for (const auto& e : batch) s -= oracle::naive_sum_log_prob(q, e.context, e.target);
      return s / batch.size();
    };
    const auto r = sft_loss(in.params, batch);
    CHECK(r.loss == doctest::Approx(f(in.params)).epsilon(1e-12));
    CHECK(oracle::max_rel_error(r.gradient, oracle::fd_gradient(f, in.params)) <= kTol);
  }
}

TEST_CASE("sft-c gradient vs finite differences, both penalty forms") {
  for (PenaltyMode mode : {PenaltyMode::batch_relu, PenaltyMode::per_sample_relu}) {
    for (int i = 0; i < kInstances; ++i) {
      const auto in = make_instance(i);
      const SftConfig cfg{0.7, 10.0, mode};
      auto f = [&](const PolicyParameters& q) {
        double pos = 0.0, neg = 0.0, per = 0.0;
        const double b = in.batch.size();
        for (const auto& e : in.batch) {
          pos -= oracle::naive_sum_log_prob(q, e.context, e.positive) / b;
          const double nll = -oracle::naive_avg_log_prob(q, e.context, e.negative);
          neg += nll / b;
          per += std::max(0.0, cfg.threshold - nll) / b;
        }
        return pos + cfg.lambda * (mode == PenaltyMode::batch_relu
                                       ? std::max(0.0, cfg.threshold - neg)
                                       : per);
      };
      const auto r = sft_c_loss(in.params, in.batch, cfg);
      CHECK(r.penalty_active);
      CHECK(r.loss == doctest::Approx(f(in.params)).epsilon(1e-12));
      CHECK(oracle::max_rel_error(r.gradient, oracle::fd_gradient(f, in.params)) <= kTol);
    }
  }
}

TEST_CASE("sft-c with an inactive penalty or lambda 0 equals sft") {
  const auto in = make_instance(3);
  std::vector<SupervisedPair> batch;
  for (const auto& e : in.batch) batch.push_back({e.context, e.positive});
  const auto plain = sft_loss(in.params, batch);
  const auto off = sft_c_loss(in.params, in.batch, {0.5, 0.01, PenaltyMode::batch_relu});
  CHECK_FALSE(off.penalty_active);
  CHECK(off.gradient == plain.gradient);
  const auto zero = sft_c_loss(in.params, in.batch, {0.0, 10.0, PenaltyMode::batch_relu});
  CHECK(zero.gradient == plain.gradient);
}

TEST_CASE("hard constraint steps only on the negatives while violated") {
  const auto in = make_instance(5);
  const auto r = sft_c_loss(in.params, in.batch, {0.1, 10.0, PenaltyMode::hard_constraint});
  CHECK(r.penalty_active);
  auto f = [&](const PolicyParameters& q) {
    double neg = 0.0;
    for (const auto& e : in.batch)
      neg -= oracle::naive_avg_log_prob(q, e.context, e.negative) / in.batch.size();
    return 10.0 - neg;
  };
  CHECK(oracle::max_rel_error(r.gradient, oracle::fd_gradient(f, in.params)) <= kTol);
}

TEST_CASE("label smoothing gradient vs finite differences") {
  for (int i = 0; i < kInstances; ++i) {
    const auto in = make_instance(i);
    std::vector<SupervisedPair> batch;
    for (const auto& e : in.batch) batch.push_back({e.context, e.positive});
    const double eps = 0.1;
    auto f = [&](const PolicyParameters& q) {
      double s = 0.0;
      const int V = q.arch().vocab;
      for (const auto& e : batch) {
        const auto z = oracle::naive_logits(q, e.context, e.target);
        for (std::size_t l = 0; l < e.target.size(); ++l)
          for (int v = 0; v < V; ++v) {
            const double w = v == e.target[l] ? 1 - eps : eps / (V - 1);
            s -= w * oracle::naive_log_prob(z[l], v);
          }
      }
      return s / batch.size();
    };
    const auto r = label_smoothing_sft_loss(in.params, batch, eps);
    CHECK(r.loss == doctest::Approx(f(in.params)).epsilon(1e-12));
    CHECK(oracle::max_rel_error(r.gradient, oracle::fd_gradient(f, in.params)) <= kTol);
  }
}

TEST_CASE("dpo gradient vs finite differences") {
  for (int i = 0; i < kInstances; ++i) {
    const auto in = make_instance(i);
    const DpoConfig cfg{0.5};
    auto f = [&](const PolicyParameters& q) {
      double dw, dl;
      naive_margin_terms(q, in, &dw, &dl);
      return -std::log(naive_sigmoid(cfg.beta * (dw - dl)));
    };
    const auto r = dpo_loss(in.params, in.ref, in.pair, cfg);
    CHECK(r.breakdown.loss == doctest::Approx(f(in.params)).epsilon(1e-12));
    CHECK(oracle::max_rel_error(r.gradient, oracle::fd_gradient(f, in.params)) <= kTol);
  }
}

TEST_CASE("cw-dpo gradient treats w_c as a constant") {
  for (int i = 0; i < kInstances; ++i) {
    const auto in = make_instance(i);
    const DpoConfig dpo{0.5};
    const CoolingConfig cool = cooling(-2.0, 0.7);
    double dw0, dl0;
    const double avg0 = naive_margin_terms(in.params, in, &dw0, &dl0);
    const double w0 = naive_sigmoid((avg0 - cool.floor) / cool.temperature);
    auto f = [&](const PolicyParameters& q) {
      double dw, dl;
      naive_margin_terms(q, in, &dw, &dl);
      return -std::log(naive_sigmoid(dpo.beta * (dw - w0 * dl)));
    };
    const auto r = cw_dpo_loss(in.params, in.ref, in.pair, dpo, cool);
    CHECK(r.breakdown.cooling_weight == doctest::Approx(w0).epsilon(1e-12));
    CHECK(r.breakdown.loss == doctest::Approx(f(in.params)).epsilon(1e-12));
    CHECK(oracle::max_rel_error(r.gradient, oracle::fd_gradient(f, in.params)) <= kTol);
  }
}

TEST_CASE("cw-dpo without stop-gradient differentiates through w_c") {
  for (int i = 0; i < kInstances; ++i) {
    const auto in = make_instance(i);
    const DpoConfig dpo{0.5};
    CoolingConfig cool = cooling(-2.0, 0.7);
    cool.stop_gradient = false;
    auto f = [&](const PolicyParameters& q) {
      double dw, dl;
      const double avg = naive_margin_terms(q, in, &dw, &dl);
      const double w = naive_sigmoid((avg - cool.floor) / cool.temperature);
      return -std::log(naive_sigmoid(dpo.beta * (dw - w * dl)));
    };
    const auto r = cw_dpo_loss(in.params, in.ref, in.pair, dpo, cool);
    CHECK(oracle::max_rel_error(r.gradient, oracle::fd_gradient(f, in.params)) <= kTol);
  }
}

TEST_CASE("focal dpo gradient vs finite differences") {
  for (int i = 0; i < kInstances; ++i) {
    const auto in = make_instance(i);
    const double beta = 0.5, gamma = 2.0;
    auto f = [&](const PolicyParameters& q) {
      double dw, dl;
      naive_margin_terms(q, in, &dw, &dl);
      const double a = naive_sigmoid(beta * (dw - dl));
      return std::pow(1 - a, gamma) * -std::log(a);
    };
    const auto r = focal_dpo_loss(in.params, in.ref, in.pair, beta, gamma);
    CHECK(r.breakdown.loss == doctest::Approx(f(in.params)).epsilon(1e-12));
    CHECK(oracle::max_rel_error(r.gradient, oracle::fd_gradient(f, in.params)) <= kTol);
  }
}

TEST_CASE("focal with gamma 0 is dpo") {
  const auto in = make_instance(2);
  const auto a = focal_dpo_loss(in.params, in.ref, in.pair, 0.3, 0.0);
  const auto b = dpo_loss(in.params, in.ref, in.pair, {0.3});
  CHECK(a.breakdown.loss == doctest::Approx(b.breakdown.loss).epsilon(1e-14));
  CHECK(oracle::max_rel_error(a.gradient, b.gradient) < 1e-14);
}

TEST_CASE("fixed weight 1 reduces cw-dpo to dpo bit-identically") {
  for (int i = 0; i < kInstances; ++i) {
    const auto in = make_instance(i);
    CoolingConfig cool;
    cool.fixed_weight = 1.0;
    const auto a = cw_dpo_loss(in.params, in.ref, in.pair, {0.1}, cool);
    const auto b = dpo_loss(in.params, in.ref, in.pair, {0.1});
    CHECK(a.breakdown.loss == b.breakdown.loss);
    CHECK(a.gradient == b.gradient);
  }
}

TEST_CASE("dpo loss is ln 2 at the reference") {
  const auto in = make_instance(1);
  const ReferenceSnapshot self(in.params);
  const auto r = dpo_loss(in.params, self, in.pair, {0.1});
  CHECK(r.breakdown.delta_w == 0.0);
  CHECK(r.breakdown.delta_l == 0.0);
  CHECK(r.breakdown.loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("cooling weight: sigmoid, monotone, override") {
  CoolingConfig c = cooling(-3.0, 1.0);
  CHECK(cooling_weight(-3.0, c) == doctest::Approx(0.5));
  CHECK(cooling_weight(-4.0, c) == doctest::Approx(naive_sigmoid(-1.0)));
  double prev = 0.0;
  for (double x = -20; x <= 0; x += 0.25) {
    const double w = cooling_weight(x, c);
    CHECK(w > 0.0);
    CHECK(w < 1.0);
    CHECK(w >= prev);
    prev = w;
  }
  c.fixed_weight = 0.7;
  CHECK(cooling_weight(-50.0, c) == 0.7);
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("residual factorizes into scale, winner and cooled loser parts") {
  for (int i = 0; i < kInstances; ++i) {
    const auto in = make_instance(i);
    const auto r = cw_dpo_loss(in.params, in.ref, in.pair, {0.3}, cooling(-2.0, 1.0));
    const auto& d = r.residual;
    const double a = r.breakdown.activation;
    CHECK(d.scale == doctest::Approx(0.3 * (1 - a)).epsilon(1e-14));
    for (std::size_t k = 0; k < d.total_winner.size(); ++k)
      CHECK(d.total_winner[k] == doctest::Approx(d.scale * d.winner_component[k]));
    for (std::size_t k = 0; k < d.total_loser.size(); ++k)
      CHECK(d.total_loser[k] ==
            doctest::Approx(-d.scale * d.cooling_weight * d.loser_component[k]));
  }
}

TEST_CASE("hard filter zeroes the gradient of very easy negatives") {
  auto in = make_instance(4);
  CoolingConfig c = cooling(-0.5, 1.0);
  c.hard_filter = true;
  const auto r = cw_dpo_loss(in.params, in.ref, in.pair, {0.1}, c);
  REQUIRE(r.breakdown.loser_avg_log_prob < c.floor);
  CHECK(r.breakdown.filtered);
  for (double g : r.gradient) CHECK(g == 0.0);
  c.hard_filter = false;
  CHECK_FALSE(cw_dpo_loss(in.params, in.ref, in.pair, {0.1}, c).breakdown.filtered);
}

TEST_CASE("stable log-sigmoid") {
  CHECK(neg_log_sigmoid(0.0) == doctest::Approx(std::log(2.0)));
  CHECK(neg_log_sigmoid(800.0) == doctest::Approx(0.0));
  CHECK(neg_log_sigmoid(-800.0) == doctest::Approx(800.0));
  CHECK(std::isfinite(neg_log_sigmoid(-1e6)));
}
