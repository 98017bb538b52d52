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

#include "cwdpo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <string>

#include "json.hpp"

#include "cwdpo/errors.hpp"
#include "cwdpo/rng.hpp"

namespace cwdpo {

namespace fs = std::filesystem;

std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "gd";
}

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "gd" || s == "sgd") return OptimizerKind::gradient_descent;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

void Optimizer::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != grad.size()) throw InputError("optimizer: gradient size mismatch");
  if (kind == OptimizerKind::gradient_descent) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= learning_rate * grad[i];
    ++t;
    return;
  }
  if (m.size() != params.size()) {
    m.assign(params.size(), 0.0);
    v.assign(params.size(), 0.0);
  }
  ++t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
    params[i] -= learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon);
  }
}

std::string_view to_string(Stage1Objective o) {
  switch (o) {
    case Stage1Objective::sft: return "sft";
    case Stage1Objective::sft_c: return "sft-c";
    case Stage1Objective::label_smoothing: return "label-smoothing";
  }
  return "?";
}

Stage1Objective parse_stage1_objective(std::string_view s) {
  if (s == "sft") return Stage1Objective::sft;
  if (s == "sft-c") return Stage1Objective::sft_c;
  if (s == "label-smoothing") return Stage1Objective::label_smoothing;
  throw ConfigError("unknown stage-1 objective '" + std::string(s) + "'");
}

void TrainingConfig::validate() const {
  arch.validate();
  if (!(stage1_learning_rate > 0.0) || !(stage2_learning_rate > 0.0))
    throw ConfigError("learning rates must be > 0");
  if (!(stage1_lr_end_fraction > 0.0 && stage1_lr_end_fraction <= 1.0))
    throw ConfigError("stage1_lr_end_fraction must be in (0, 1]");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (probe_interval < 1) throw ConfigError("probe_interval must be >= 1");
  if (trace_interval < 1) throw ConfigError("trace_interval must be >= 1");
  if (checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be >= 1");
  if (!(init_scale > 0.0)) throw ConfigError("init_scale must be > 0");
  sft.validate();
  preference.dpo.validate();
  preference.cooling.validate();
  if (!(preference.focal_gamma >= 0.0)) throw ConfigError("focal gamma must be >= 0");
  {
    double w = 0.0;
    for (double x : stage1_tier_weights) {
      if (!(x >= 0.0)) throw ConfigError("stage-1 tier weights must be >= 0");
      w += x;
    }
    if (!(w > 0.0)) throw ConfigError("stage-1 tier weights must not all be zero");
  }
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw ConfigError("label_smoothing must be in [0, 1)");
}

TrainerState::TrainerState(const TrainingConfig& cfg)
    : config(cfg),
      params(PolicyParameters::random(cfg.arch, derive_seed(cfg.seed, "init"), cfg.init_scale)),
      initial(params) {
  cfg.validate();
  optimizer.kind = cfg.optimizer;
}

TrainingData::TrainingData(const DatasetSpec& s)
    : spec(s), split(split_corpus(generate_corpus(s), s.split_fraction)),
      probe(build_probe_set(s)), grammar(s.vocab) {}

namespace {

void require_finite(double loss, std::span<const double> grad) {
  bool ok = std::isfinite(loss);
  for (double g : grad) ok = ok && std::isfinite(g);
  if (!ok) throw std::range_error("non-finite");
}

[[noreturn]] void diverged(const TrainerState& state, int stage, std::size_t step,
                           std::span<const LabeledExample> batch) {
  std::string path;
  if (state.replay_dir) {
    fs::create_directories(*state.replay_dir);
    const fs::path p = *state.replay_dir / ("divergence_stage" + std::to_string(stage) +
                                            "_step" + std::to_string(step) + ".jsonl");
    std::ofstream os(p);
    write_examples(os, batch);
    path = p.string();
  }
  throw DivergenceError("non-finite loss at stage " + std::to_string(stage) + " step " +
                            std::to_string(step),
                        path);
}

LabeledExample as_example(const PreferencePair& p) {
  return {p.context, p.winner, {Negative{p.loser, p.loser_tier}}};
}

void record_probe(TrainerState& state, const ProbeEvaluator& eval, int stage, std::size_t step) {
  state.probes.push_back(eval.report(state.params, stage, step));
}

}  // namespace

void run_stage1(TrainerState& state, const TrainingData& data) {
  if (state.stage != 1) throw ProtocolError("stage 1 after the reference snapshot");
  const auto& cfg = state.config;
  const auto& corpus = data.split.stage1;
  if (corpus.empty()) throw InputError("empty stage-1 corpus");
  state.optimizer.learning_rate = cfg.stage1_learning_rate;
  const std::uint64_t stage_seed = derive_seed(cfg.seed, "stage1");

  const ProbeEvaluator eval(data.probe, state.initial);
  if (cfg.stage1_steps > 0) record_probe(state, eval, 1, 0);

  std::vector<LabeledExample> picked;
  for (std::size_t step = 1; step <= cfg.stage1_steps; ++step) {
    const double progress =
        static_cast<double>(step - 1) / static_cast<double>(cfg.stage1_steps);
    state.optimizer.learning_rate =
        cfg.stage1_learning_rate * (1.0 - (1.0 - cfg.stage1_lr_end_fraction) * progress);
    const std::uint64_t s = derive_seed(stage_seed, step);
    Rng ex_rng(derive_seed(s, "examples"));
    Rng neg_rng(derive_seed(s, "negatives"));
    picked.clear();
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto& ex = corpus[ex_rng.below(corpus.size())];
      const Negative& n = pick_dataset_negative(ex, cfg.stage1_tier_weights, neg_rng);
      picked.push_back({ex.context, ex.positive, {n}});
    }

    StepLog log;
    log.stage = 1;
    log.step = step;
    std::vector<double> grad;
    double loss = 0.0;
    if (cfg.stage1_objective == Stage1Objective::sft_c) {
      std::vector<ConstrainedExample> batch;
      for (const auto& e : picked) batch.push_back({e.context, e.positive, e.negatives[0].tokens});
      auto r = sft_c_loss(state.params, batch, cfg.sft);
      loss = r.loss;
      grad = std::move(r.gradient);
      log.negative_nll = r.negative_nll;
      log.penalty_active = r.penalty_active;
    } else {
      std::vector<SupervisedPair> batch;
      for (const auto& e : picked) batch.push_back({e.context, e.positive});
      auto r = cfg.stage1_objective == Stage1Objective::sft
                   ? sft_loss(state.params, batch)
                   : label_smoothing_sft_loss(state.params, batch, cfg.label_smoothing);
      loss = r.loss;
      grad = std::move(r.gradient);
      double neg = 0.0;
      for (const auto& e : picked)
        neg -= avg_token_log_prob(state.params, e.context, e.negatives[0].tokens);
      log.negative_nll = neg / static_cast<double>(picked.size());
    }
    try {
      require_finite(loss, grad);
    } catch (const std::range_error&) {
      diverged(state, 1, step, picked);
    }
    log.loss = loss;
    state.optimizer.step(state.params.values(), grad);
    if (!state.params.all_finite()) diverged(state, 1, step, picked);
    state.log.push_back(log);
    state.stage1_steps_done = step;

    if (step % cfg.probe_interval == 0 || step == cfg.stage1_steps) record_probe(state, eval, 1, step);
    if (step % cfg.checkpoint_interval == 0 || step == cfg.stage1_steps)
      state.checkpoints.push_back({1, step, state.params});
  }
  state.stage1_complete = true;
}

void snapshot_reference(TrainerState& state) {
  if (!state.stage1_complete) throw ProtocolError("reference snapshot before stage 1 completed");
  if (state.stage2_steps_done > 0)
    throw ProtocolError("reference snapshot after stage-2 updates");
  state.reference.emplace(state.params);
  state.stage = 2;
}

bool early_stop_check(std::span<const ProbeReport> history, const EarlyStopRule& rule) {
  if (rule.patience == 0) return false;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t flat = 0;
  for (const auto& r : history) {
    if (r.delta_logp.positives > best + rule.min_delta) {
      best = r.delta_logp.positives;
      flat = 0;
    } else {
      ++flat;
    }
  }
  return flat >= rule.patience;
}

std::vector<CurriculumSample> measure_curriculum(const PolicyParameters& params,
                                                 std::span<const LabeledExample> fixtures,
                                                 const CoolingConfig& cooling,
                                                 std::size_t step) {
  CoolingConfig sig = cooling;
  sig.fixed_weight.reset();
  std::vector<CurriculumSample> out;
  for (std::size_t f = 0; f < fixtures.size(); ++f) {
    const auto& ex = fixtures[f];
    for (std::size_t k = 0; k < ex.negatives.size(); ++k) {
      const double avg = avg_token_log_prob(params, ex.context, ex.negatives[k].tokens);
      out.push_back({step, f, ex.negatives[k].tier.tier, k, avg, cooling_weight(avg, sig)});
    }
  }
  return out;
}

void run_stage2(TrainerState& state, const TrainingData& data) {
  if (state.stage != 2 || !state.reference)
    throw ProtocolError("stage 2 requires a reference snapshot");
  const auto& cfg = state.config;
  const auto& corpus = data.split.stage2;
  if (corpus.empty()) throw InputError("empty stage-2 corpus");
  state.optimizer.learning_rate = cfg.stage2_learning_rate;
  const std::uint64_t stage_seed = derive_seed(cfg.seed, "stage2");
  const BatchOptions options{data.spec.mix_fraction, cfg.batch_size, data.spec.tier_weights};
  const std::span<const LabeledExample> fixtures(
      corpus.data(), std::min(cfg.curriculum_fixtures, corpus.size()));
  const ReferenceSnapshot ref = *state.reference;

  const ProbeEvaluator eval(data.probe, ref.params());
  if (cfg.stage2_steps > 0 && state.stage2_steps_done == 0) {
    record_probe(state, eval, 2, 0);
    auto c = measure_curriculum(state.params, fixtures, cfg.preference.cooling, 0);
    state.curriculum.insert(state.curriculum.end(), c.begin(), c.end());
  }

  const std::size_t first_probe = state.probes.size() - (cfg.stage2_steps > 0 ? 1 : 0);
  for (std::size_t step = state.stage2_steps_done + 1; step <= cfg.stage2_steps; ++step) {
    const auto batch = build_preference_batch(corpus, state.params, data.grammar, options,
                                              derive_seed(stage_seed, step));
    auto r = preference_batch_loss(state.params, ref, batch, cfg.preference);
    try {
      require_finite(r.loss, r.gradient);
    } catch (const std::range_error&) {
      std::vector<LabeledExample> dump;
      for (const auto& p : batch) dump.push_back(as_example(p));
      diverged(state, 2, step, dump);
    }

    StepLog log;
    log.stage = 2;
    log.step = step;
    log.loss = r.loss;
    std::array<double, 3> tier_sum{};
    std::array<std::size_t, 3> tier_n{};
    double wc = 0.0, a = 0.0, dw = 0.0, dl = 0.0;
    for (const auto& b : r.pairs) {
      wc += b.cooling_weight;
      a += b.activation;
      dw += b.delta_w;
      dl += b.delta_l;
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
      tier_sum[tier_index(batch[i].loser_tier.tier)] += r.pairs[i].cooling_weight;
      ++tier_n[tier_index(batch[i].loser_tier.tier)];
    }
    const double n = static_cast<double>(r.pairs.size());
    log.mean_cooling_weight = wc / n;
    log.mean_activation = a / n;
    log.mean_delta_w = dw / n;
    log.mean_delta_l = dl / n;
    for (std::size_t t = 0; t < 3; ++t)
      log.tier_cooling_weight[t] = tier_n[t] ? tier_sum[t] / static_cast<double>(tier_n[t])
                                             : std::numeric_limits<double>::quiet_NaN();

    state.optimizer.step(state.params.values(), r.gradient);
    if (!state.params.all_finite()) {
      std::vector<LabeledExample> dump;
      for (const auto& p : batch) dump.push_back(as_example(p));
      diverged(state, 2, step, dump);
    }
    state.log.push_back(log);
    state.stage2_steps_done = step;

    if (step % cfg.trace_interval == 0 || step == cfg.stage2_steps) {
      auto c = measure_curriculum(state.params, fixtures, cfg.preference.cooling, step);
      state.curriculum.insert(state.curriculum.end(), c.begin(), c.end());
    }
    if (step % cfg.checkpoint_interval == 0 || step == cfg.stage2_steps)
      state.checkpoints.push_back({2, step, state.params});
    if (step % cfg.probe_interval == 0 || step == cfg.stage2_steps) {
      record_probe(state, eval, 2, step);
      const std::span<const ProbeReport> hist(state.probes.data() + first_probe,
                                              state.probes.size() - first_probe);
      if (early_stop_check(hist, cfg.early_stop)) {
        state.early_stopped = true;
        if (state.checkpoints.empty() || state.checkpoints.back().step != step ||
            state.checkpoints.back().stage != 2)
          state.checkpoints.push_back({2, step, state.params});
        break;
      }
    }
  }
}

TrainerState train_two_stage(const TrainingConfig& cfg, const TrainingData& data,
                             const std::optional<fs::path>& out, std::string_view config_echo) {
  TrainerState state(cfg);
  if (out) state.replay_dir = *out;
  run_stage1(state, data);
  snapshot_reference(state);
  run_stage2(state, data);
  if (out) write_bundle(*out, state, data, config_echo);
  return state;
}

namespace {

std::string fmt(double x) {
  if (std::isnan(x)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string hex(std::uint64_t x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

nlohmann::ordered_json report_json(const ProbeReport& r) {
  return nlohmann::ordered_json::parse(to_json_line(r));
}

}  // namespace

void write_steps_csv(std::ostream& os, std::span<const StepLog> log) {
  os << "stage,step,loss,mean_cooling_weight,mean_activation,mean_delta_w,mean_delta_l,"
        "wc_easy,wc_medium,wc_hard,negative_nll,penalty_active\n";
  for (const auto& l : log) {
    os << l.stage << ',' << l.step << ',' << fmt(l.loss) << ',';
    if (l.stage == 2) {
      os << fmt(l.mean_cooling_weight) << ',' << fmt(l.mean_activation) << ','
         << fmt(l.mean_delta_w) << ',' << fmt(l.mean_delta_l) << ','
         << fmt(l.tier_cooling_weight[0]) << ',' << fmt(l.tier_cooling_weight[1]) << ','
         << fmt(l.tier_cooling_weight[2]) << ",,";
    } else {
      os << ",,,,,,," << fmt(l.negative_nll) << ',';
    }
    os << (l.penalty_active ? 1 : 0) << '\n';
  }
}

std::string summary_json(const TrainerState& state, const TrainingData& data) {
  const auto& cfg = state.config;
  nlohmann::ordered_json j;
  j["format"] = 1;
  j["seed"] = cfg.seed;
  j["stage1_objective"] = std::string(to_string(cfg.stage1_objective));
  j["stage2_objective"] = std::string(to_string(cfg.preference.kind));
  j["optimizer"] = std::string(to_string(cfg.optimizer));
  j["parameters"] = state.params.size();
  j["stage1_steps"] = state.stage1_steps_done;
  j["stage2_steps"] = state.stage2_steps_done;
  j["early_stopped"] = state.early_stopped;
  j["corpus_fingerprint"] = hex(fingerprint(data.split.stage1) ^ mix64(fingerprint(data.split.stage2)));
  j["probe_fingerprint"] = hex(fingerprint(data.probe));
  j["probe_size"] = data.probe.size();
  j["reference_fingerprint"] =
      state.reference ? nlohmann::ordered_json(hex(state.reference->fingerprint())) : nullptr;
  j["final_fingerprint"] = hex(state.params.fingerprint());

  nlohmann::ordered_json last = nullptr, last1 = nullptr;
  for (const auto& p : state.probes) {
    if (p.stage == 1) last1 = report_json(p);
    last = report_json(p);
  }
  j["stage1_final_probe"] = last1;
  j["final_probe"] = last;

  double neg_nll = std::numeric_limits<double>::quiet_NaN();
  for (const auto& l : state.log)
    if (l.stage == 1) neg_nll = l.negative_nll;
  j["stage1_final_batch_negative_nll"] = std::isnan(neg_nll) ? nlohmann::ordered_json(nullptr)
                                                             : nlohmann::ordered_json(neg_nll);

  const auto trace = cooling_weight_trace(state.curriculum);
  nlohmann::ordered_json cur;
  for (Tier t : kAllTiers) {
    const auto k = tier_index(t);
    nlohmann::ordered_json e;
    e["time_to_half"] = trace.time_to_half[k] ? nlohmann::ordered_json(*trace.time_to_half[k])
                                              : nlohmann::ordered_json(nullptr);
    const auto& w = trace.mean_weight[k];
    e["final_mean_weight"] = (w.empty() || std::isnan(w.back())) ? nlohmann::ordered_json(nullptr)
                                                                 : nlohmann::ordered_json(w.back());
    cur[std::string(to_string(t))] = e;
  }
  j["curriculum"] = cur;
  return j.dump(2);
}

void write_bundle(const fs::path& out, const TrainerState& state, const TrainingData& data,
                  std::string_view config_echo) {
  fs::create_directories(out / "checkpoints");
  {
    std::ofstream os(out / "config.ini");
    os << config_echo;
  }
  save_parameters((out / "checkpoints" / "initial.cwdp").string(), state.initial);
  if (state.reference)
    save_parameters((out / "checkpoints" / "reference.cwdp").string(), state.reference->params());
  for (const auto& c : state.checkpoints)
    save_parameters((out / "checkpoints" /
                     ("stage" + std::to_string(c.stage) + "_step" + std::to_string(c.step) + ".cwdp"))
                        .string(),
                    c.params);
  save_parameters((out / "checkpoints" / "final.cwdp").string(), state.params);
  {
    std::ofstream os(out / "steps.csv");
    write_steps_csv(os, state.log);
  }
  {
    std::ofstream os(out / "probes.jsonl");
    for (const auto& p : state.probes) os << to_json_line(p) << '\n';
  }
  {
    std::ofstream os(out / "curriculum.csv");
    write_curriculum_csv(os, state.curriculum);
  }
  {
    const std::vector<std::size_t> ids{0, 1, 2, 3};
    std::vector<std::size_t> valid;
    for (auto i : ids)
      if (i < data.probe.size()) valid.push_back(i);
    auto write_snap = [&](const char* name, const PolicyParameters& p) {
      std::ofstream os(out / name);
      write_snapshots_csv(os, top_k_snapshots(p, data.probe, valid));
    };
    write_snap("snapshots_initial.csv", state.initial);
    if (state.reference) write_snap("snapshots_reference.csv", state.reference->params());
    write_snap("snapshots_final.csv", state.params);
  }
  {
    std::ofstream os(out / "probe_set.jsonl");
    write_examples(os, data.probe);
  }
  {
    std::ofstream os(out / "summary.json");
    os << summary_json(state, data) << '\n';
  }
}

}  // namespace cwdpo
