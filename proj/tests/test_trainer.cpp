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
#include <filesystem>
#include <fstream>

#include "cwdpo/errors.hpp"
#include "cwdpo/trainer.hpp"
#include "oracles.hpp"

using namespace cwdpo;

namespace {

DatasetSpec tiny_spec() {
  DatasetSpec s;
  s.corpus_size = 120;
  s.probe_size = 12;
  s.heldout_pool = 24;
  return s;
}

TrainingConfig tiny_config() {
  TrainingConfig c;
  c.batch_size = 8;
  c.stage1_steps = 12;
  c.stage2_steps = 10;
  c.probe_interval = 5;
  c.trace_interval = 5;
  c.checkpoint_interval = 5;
  c.curriculum_fixtures = 4;
  return c;
}

const TrainingData& tiny_data() {
  static const TrainingData d(tiny_spec());
  return d;
}

ProbeReport with_delta(double d) {
  ProbeReport r;
  r.delta_logp.positives = d;
  return r;
}

// Counter-based rule written independently of the library.
std::size_t reference_stop_index(const std::vector<double>& h, std::size_t patience, double eps) {
  double best = -1e300;
  std::size_t since = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (h[i] - best > eps) {
      best = h[i];
      since = 0;
    } else if (++since == patience) {
      return i;
    }
  }
  return h.size();
}

}  // namespace

TEST_CASE("T1 = 0 and T2 = 0 leave parameters unchanged") {
  auto cfg = tiny_config();
  cfg.stage1_steps = 0;
  cfg.stage2_steps = 0;
  TrainerState st(cfg);
  const auto before = st.params;
  run_stage1(st, tiny_data());
  CHECK(st.params == before);
  snapshot_reference(st);
  run_stage2(st, tiny_data());
  CHECK(st.params == before);
}

TEST_CASE("sft-c with lambda 0 follows the sft trajectory exactly") {
  auto a = tiny_config();
  a.stage1_objective = Stage1Objective::sft;
  auto b = tiny_config();
  b.stage1_objective = Stage1Objective::sft_c;
  b.sft.lambda = 0.0;
  TrainerState sa(a), sb(b);
  run_stage1(sa, tiny_data());
  run_stage1(sb, tiny_data());
  CHECK(sa.params == sb.params);
}

TEST_CASE("protocol order is enforced") {
  TrainerState st(tiny_config());
  CHECK_THROWS_AS(snapshot_reference(st), ProtocolError);
  CHECK_THROWS_AS(run_stage2(st, tiny_data()), ProtocolError);
  run_stage1(st, tiny_data());
  snapshot_reference(st);
  const auto bytes = st.reference->fingerprint();
  snapshot_reference(st);
  CHECK(st.reference->fingerprint() == bytes);
  CHECK_THROWS_AS(run_stage1(st, tiny_data()), ProtocolError);
  run_stage2(st, tiny_data());
  CHECK_THROWS_AS(snapshot_reference(st), ProtocolError);
}

TEST_CASE("reference is untouched by stage 2, first dpo loss is ln 2") {
  auto cfg = tiny_config();
  cfg.preference.kind = Objective::dpo;
  TrainerState st(cfg);
  run_stage1(st, tiny_data());
  snapshot_reference(st);
  const auto ref_bytes = st.reference->fingerprint();
  const auto ref_copy = st.reference->params();
  run_stage2(st, tiny_data());
  CHECK(st.reference->fingerprint() == ref_bytes);
  CHECK(st.reference->params() == ref_copy);
  CHECK_FALSE(st.params == ref_copy);
  const auto first = std::find_if(st.log.begin(), st.log.end(), [](auto& l) { return l.stage == 2; });
  REQUIRE(first != st.log.end());
  CHECK(first->loss == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(first->mean_delta_w == 0.0);
}

TEST_CASE("cw-dpo with fixed weight 1 reproduces the dpo trajectory bit for bit") {
  auto a = tiny_config();
  a.preference.kind = Objective::dpo;
  auto b = tiny_config();
  b.preference.kind = Objective::cw_dpo;
  b.preference.cooling.fixed_weight = 1.0;
  const auto ra = train_two_stage(a, tiny_data());
  const auto rb = train_two_stage(b, tiny_data());
  CHECK(ra.params == rb.params);
  for (std::size_t i = 0; i < ra.log.size(); ++i) CHECK(ra.log[i].loss == rb.log[i].loss);
}

TEST_CASE("identical seed gives identical summaries; different seed does not") {
  const auto cfg = tiny_config();
  const auto a = train_two_stage(cfg, tiny_data());
  const auto b = train_two_stage(cfg, tiny_data());
  CHECK(summary_json(a, tiny_data()) == summary_json(b, tiny_data()));
  auto other = cfg;
  other.seed = 9;
  const auto c = train_two_stage(other, tiny_data());
  CHECK_FALSE(c.params == a.params);
}

TEST_CASE("logs, probes and checkpoints follow their intervals") {
  const auto st = train_two_stage(tiny_config(), tiny_data());
  CHECK(st.log.size() == 22);
  std::size_t s1 = 0, s2 = 0;
  for (const auto& p : st.probes) (p.stage == 1 ? s1 : s2)++;
  CHECK(s1 == 1 + 3);  // 0, 5, 10, 12
  CHECK(s2 == 1 + 2);  // 0, 5, 10
  for (const auto& p : st.probes) p.check_ranges(32);
  for (const auto& l : st.log)
    if (l.stage == 2) {
      CHECK(l.mean_cooling_weight > 0.0);
      CHECK(l.mean_cooling_weight < 1.0);
    }
  CHECK(st.checkpoints.size() == 3 + 2);
}

TEST_CASE("early stop rule") {
  const EarlyStopRule rule{3, 1e-4};
  SUBCASE("monotone improvement never stops") {
    std::vector<ProbeReport> h;
    for (int i = 0; i < 30; ++i) {
      h.push_back(with_delta(0.01 * i));
      CHECK_FALSE(early_stop_check(h, rule));
    }
  }
  SUBCASE("flat history stops at the 4th probe") {
    std::vector<ProbeReport> h;
    for (int i = 1; i <= 4; ++i) {
      h.push_back(with_delta(0.5));
      CHECK(early_stop_check(h, rule) == (i == 4));
    }
  }
  SUBCASE("noisy histories match a reference implementation") {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> vals;
      for (int i = 0; i < 40; ++i) vals.push_back(0.002 * i + rng.uniform(-0.05, 0.05));
      const std::size_t want = reference_stop_index(vals, rule.patience, rule.min_delta);
      std::vector<ProbeReport> h;
      std::size_t got = vals.size();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        h.push_back(with_delta(vals[i]));
        if (early_stop_check(h, rule)) {
          got = i;
          break;
        }
      }
      CHECK(got == want);
    }
  }
  SUBCASE("patience 0 disables") {
    std::vector<ProbeReport> h(10, with_delta(0.0));
    CHECK_FALSE(early_stop_check(h, {0, 1e-4}));
  }
}

TEST_CASE("early stop ends stage 2 and keeps a checkpoint") {
  auto cfg = tiny_config();
  cfg.stage2_steps = 40;
  cfg.probe_interval = 2;
  cfg.early_stop = {1, 1e9};
  const auto st = train_two_stage(cfg, tiny_data());
  CHECK(st.early_stopped);
  CHECK(st.stage2_steps_done < 40);
  CHECK(st.checkpoints.back().step == st.stage2_steps_done);
}

TEST_CASE("divergence aborts and saves the batch for replay") {
  auto cfg = tiny_config();
  cfg.stage1_learning_rate = 1e305;
  const auto dir = std::filesystem::temp_directory_path() / "cwdpo_divergence_test";
  std::filesystem::remove_all(dir);
  try {
    train_two_stage(cfg, tiny_data(), dir);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    REQUIRE_FALSE(e.replay_path().empty());
    CHECK(std::filesystem::exists(e.replay_path()));
    std::ifstream is(e.replay_path());
    CHECK(read_examples(is).size() == cfg.batch_size);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("adam step matches a hand computation") {
  Optimizer opt;
  opt.kind = OptimizerKind::adam;
  opt.learning_rate = 0.1;
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{0.5, -0.25};
  opt.step(p, g);
  // first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.1 * 0.25 / (0.25 + 1e-8)));
  Optimizer gd;
  gd.learning_rate = 0.5;
  std::vector<double> q{1.0};
  gd.step(q, std::vector<double>{2.0});
  CHECK(q[0] == 0.0);
}

TEST_CASE("training config validation") {
  auto c = tiny_config();
  c.stage1_learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.probe_interval = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.stage1_tier_weights = {0, 0, 0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("bundle contains every artifact") {
  const auto dir = std::filesystem::temp_directory_path() / "cwdpo_bundle_test";
  std::filesystem::remove_all(dir);
  const auto st = train_two_stage(tiny_config(), tiny_data(), dir, "[run]\nseed = 0\n");
  for (const char* f : {"config.ini", "steps.csv", "probes.jsonl", "curriculum.csv",
                        "summary.json", "snapshots_final.csv", "probe_set.jsonl",
                        "checkpoints/reference.cwdp", "checkpoints/final.cwdp"})
    CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
  CHECK(load_parameters((dir / "checkpoints/final.cwdp").string()) == st.params);
  std::ifstream is(dir / "steps.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header.rfind("stage,step,loss,mean_cooling_weight,mean_activation", 0) == 0);
  std::filesystem::remove_all(dir);
}
