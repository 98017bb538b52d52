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

#include "cwdpo/suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "cwdpo/errors.hpp"

namespace cwdpo {

namespace fs = std::filesystem;

namespace {

double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw InputError("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void run_one(const ExperimentConfig& cfg, const fs::path& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainingData data(cfg.data);
  ExperimentConfig echo = cfg;
  echo.out = out;
  echo.grid.clear();
  train_two_stage(cfg.resolved(), data, out, format_config(echo));
  const double train_s = seconds_since(t0);

  double dyn_s = 0.0;
  if (cfg.dynamics && cfg.training.optimizer == OptimizerKind::gradient_descent &&
      cfg.resolved().preference.kind != Objective::focal_dpo) {
    const auto t1 = std::chrono::steady_clock::now();
    DynamicsOptions opt;
    opt.pairs = cfg.dynamics_pairs;
    run_dynamics_suite(out, opt);
    dyn_s = seconds_since(t1);
  }
  nlohmann::ordered_json t;
  t["train_seconds"] = train_s;
  t["dynamics_seconds"] = dyn_s;
  t["total_seconds"] = seconds_since(t0);
  std::ofstream(out / "timing.json") << t.dump(2) << '\n';
}

LossSpec loss_spec_for(const TrainingConfig& t, const ReferenceSnapshot* ref) {
  LossSpec spec;
  switch (t.preference.kind) {
    case Objective::dpo: spec.kind = LossKind::dpo; break;
    case Objective::cw_dpo: spec.kind = LossKind::cw_dpo; break;
    case Objective::focal_dpo:
      throw CapabilityError("the dynamics suite does not cover focal-dpo");
  }
  spec.dpo = t.preference.dpo;
  spec.cooling = t.preference.cooling;
  spec.reference = ref;
  return spec;
}

std::string fmt(double x) {
  if (std::isnan(x)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  if (cfg.grid.empty()) {
    run_one(cfg, out);
    return;
  }
  run_one(cfg, out / "baseline");
  for (const auto& g : cfg.grid) {
    ExperimentConfig v = cfg;
    v.ablations.push_back(g);
    std::string name(to_string(g.kind));
    if (g.value) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "_%g", *g.value);
      name += buf;
    }
    run_one(v, out / name);
  }
}

std::vector<ProbePair> dynamics_pairs(std::span<const LabeledExample> corpus, std::size_t n) {
  if (corpus.size() < 2 * n) throw InputError("corpus too small for the requested pairs");
  auto pair_of = [](const LabeledExample& ex, std::size_t i) {
    const Tier want = kAllTiers[i % 3];
    const Negative* neg = nullptr;
    for (const auto& ng : ex.negatives)
      if (ng.tier.tier == want && !neg) neg = &ng;
    if (!neg) neg = &ex.negatives.front();
    return PreferencePair{ex.context, ex.positive, neg->tokens, neg->tier};
  };
  std::vector<ProbePair> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({pair_of(corpus[i], i), pair_of(corpus[i + n], i + 1)});
  return out;
}

DynamicsReport run_dynamics_suite(const fs::path& bundle, const DynamicsOptions& options) {
  const ExperimentConfig cfg = parse_config(read_file(bundle / "config.ini"));
  const TrainingConfig tc = cfg.resolved();
  if (tc.optimizer != OptimizerKind::gradient_descent)
    throw CapabilityError("the dynamics suite needs a plain gradient-descent bundle");

  const fs::path cdir = bundle / "checkpoints";
  std::vector<std::pair<std::size_t, PolicyParameters>> ckpts;
  if (fs::exists(cdir / "reference.cwdp"))
    ckpts.emplace_back(0, load_parameters((cdir / "reference.cwdp").string()));
  const std::regex re("stage2_step([0-9]+)\\.cwdp");
  std::vector<std::pair<std::size_t, fs::path>> found;
  if (fs::exists(cdir))
    for (const auto& e : fs::directory_iterator(cdir)) {
      std::smatch m;
      const std::string name = e.path().filename().string();
      if (std::regex_match(name, m, re)) found.emplace_back(std::stoul(m[1]), e.path());
    }
  std::sort(found.begin(), found.end());
  for (const auto& [step, p] : found) ckpts.emplace_back(step, load_parameters(p.string()));
  if (ckpts.empty()) throw InputError("bundle has no checkpoints");

  const ReferenceSnapshot ref(ckpts.front().second);
  const PolicyParameters& current = ckpts.back().second;
  const LossSpec spec = loss_spec_for(tc, &ref);
  const TrainingData data(cfg.data);
  const auto pairs = dynamics_pairs(data.split.stage2, options.pairs);

  DynamicsReport rep;
  std::vector<double> rel, ratios;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const ObservingSample o{pairs[i].observing.context, pairs[i].observing.winner};
    const auto b = predict_influence(current, pairs[i].updating, o, spec, options.eta);
    rep.verification.push_back({i, options.eta, b.predicted, b.actual, b.relative_error()});
    rel.push_back(b.relative_error());
    if (options.eta_sweep) {
      double eta = options.sweep_start;
      double prev = std::numeric_limits<double>::quiet_NaN();
      for (std::size_t k = 0; k < options.sweep_levels; ++k, eta /= 2.0) {
        const auto s = predict_influence(current, pairs[i].updating, o, spec, eta);
        const double err = std::abs(s.actual - s.predicted);
        const double ratio = std::isnan(prev) ? prev : prev / err;
        rep.halving.push_back({i, eta, err, ratio});
        if (!std::isnan(ratio)) ratios.push_back(ratio);
        prev = err;
      }
    }
  }
  rep.median_relative_error = median(rel);
  rep.median_halving_ratio = median(ratios);

  if (ckpts.size() >= 2) {
    std::vector<CheckpointView> views;
    for (const auto& [step, p] : ckpts) views.push_back({step, &p});
    rep.norms = track_component_norms(views, pairs, spec, tc.stage2_learning_rate);
  }

  rep.profile = regularization_profile(current, ref, pairs.front().updating, tc.preference.dpo,
                                       tc.preference.cooling);
  for (const auto& r : rep.profile) {
    if (r.vanilla_loser_grad_norm == 0.0) continue;
    const double expect = r.factor_ratio * r.vanilla_loser_grad_norm;
    rep.max_profile_ratio_error =
        std::max(rep.max_profile_ratio_error,
                 std::abs(r.cooled_loser_grad_norm - expect) / std::max(expect, 1e-300));
  }

  const fs::path dir = bundle / "dynamics";
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "verification.csv");
    os << "pair,eta,predicted,actual,relative_error\n";
    for (const auto& r : rep.verification)
      os << r.pair << ',' << fmt(r.eta) << ',' << fmt(r.predicted) << ',' << fmt(r.actual) << ','
         << fmt(r.relative_error) << '\n';
  }
  if (options.eta_sweep) {
    std::ofstream os(dir / "halving.csv");
    os << "pair,eta,error,ratio\n";
    for (const auto& r : rep.halving)
      os << r.pair << ',' << fmt(r.eta) << ',' << fmt(r.error) << ',' << fmt(r.ratio) << '\n';
  }
  {
    std::ofstream os(dir / "component_norms.csv");
    write_component_norms_csv(os, rep.norms);
  }
  {
    std::ofstream os(dir / "profile.csv");
    write_profile_csv(os, rep.profile);
  }
  {
    nlohmann::ordered_json j;
    j["loss"] = std::string(to_string(spec.kind));
    j["pairs"] = pairs.size();
    j["checkpoints"] = ckpts.size();
    j["eta"] = options.eta;
    j["median_relative_error"] = rep.median_relative_error;
    j["median_halving_ratio"] = std::isnan(rep.median_halving_ratio)
                                    ? nlohmann::ordered_json(nullptr)
                                    : nlohmann::ordered_json(rep.median_halving_ratio);
    j["max_profile_ratio_error"] = rep.max_profile_ratio_error;
    std::ofstream(dir / "dynamics.json") << j.dump(2) << '\n';
  }
  return rep;
}

CompareReport compare_runs(const fs::path& a, const fs::path& b) {
  const auto sa = nlohmann::json::parse(read_file(a / "summary.json"));
  const auto sb = nlohmann::json::parse(read_file(b / "summary.json"));
  if (sa.at("probe_fingerprint") != sb.at("probe_fingerprint"))
    throw ComparisonError("bundles were probed on different probe sets");

  std::ifstream ia(a / "probes.jsonl"), ib(b / "probes.jsonl");
  if (!ia || !ib) throw InputError("bundle is missing probes.jsonl");
  const auto ra = read_probe_reports(ia);
  const auto rb = read_probe_reports(ib);
  if (ra.empty() || rb.empty()) throw InputError("bundle has no probe reports");

  CompareReport out;
  for (const auto& x : ra)
    for (const auto& y : rb)
      if (x.stage == y.stage && x.step == y.step) out.series.push_back({x.stage, x.step, x, y});
  out.final_a = ra.back();
  out.final_b = rb.back();
  return out;
}

namespace {

struct Metric {
  const char* name;
  double (*get)(const ProbeReport&);
};

constexpr Metric kMetrics[] = {
    {"entropy", [](const ProbeReport& r) { return r.entropy; }},
    {"positive_avg_logp", [](const ProbeReport& r) { return r.positive_avg_logp; }},
    {"delta_logp_positive", [](const ProbeReport& r) { return r.delta_logp.positives; }},
    {"tv", [](const ProbeReport& r) { return r.tv; }},
    {"js", [](const ProbeReport& r) { return r.js; }},
    {"ece", [](const ProbeReport& r) { return r.ece; }},
    {"top1_mass", [](const ProbeReport& r) { return r.top1_mass; }},
};

}  // namespace

void write_compare_csv(std::ostream& os, const CompareReport& r) {
  os << "stage,step";
  for (const auto& m : kMetrics) os << ',' << m.name << "_a," << m.name << "_b," << m.name << "_delta";
  os << '\n';
  for (const auto& row : r.series) {
    os << row.stage << ',' << row.step;
    for (const auto& m : kMetrics) {
      const double x = m.get(row.a), y = m.get(row.b);
      os << ',' << fmt(x) << ',' << fmt(y) << ',' << fmt(y - x);
    }
    os << '\n';
  }
}

std::string compare_summary_json(const CompareReport& r) {
  nlohmann::ordered_json j;
  for (const auto& m : kMetrics) {
    nlohmann::ordered_json e;
    const double x = m.get(r.final_a), y = m.get(r.final_b);
    e["a"] = x;
    e["b"] = y;
    e["delta"] = y - x;
    j[m.name] = e;
  }
  return j.dump(2);
}

}  // namespace cwdpo
