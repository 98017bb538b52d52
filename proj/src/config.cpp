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

#include "cwdpo/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace cwdpo {

namespace {

struct AblationName {
  AblationKind kind;
  const char* name;
};

constexpr AblationName kAblationNames[] = {
    {AblationKind::no_smooth_sft, "no-smooth-sft"},
    {AblationKind::no_negative_sampling, "no-negative-sampling"},
    {AblationKind::hard_constraint, "hard-constraint"},
    {AblationKind::no_cw_dpo, "no-cw-dpo"},
    {AblationKind::fixed_cooling_weight, "fixed-cooling-weight"},
    {AblationKind::no_negative_filtering, "no-negative-filtering"},
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double to_double(const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

std::uint64_t to_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("expected a boolean, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

std::array<double, 3> to_triple(const std::string& s) {
  const auto parts = split_list(s);
  if (parts.size() != 3) throw ConfigError("expected three comma-separated numbers");
  return {to_double(parts[0]), to_double(parts[1]), to_double(parts[2])};
}

std::string fmt_triple(const std::array<double, 3>& a) {
  return fmt_double(a[0]) + ", " + fmt_double(a[1]) + ", " + fmt_double(a[2]);
}

std::string fmt_ablations(const std::vector<Ablation>& list) {
  std::string s;
  for (const auto& a : list) {
    if (!s.empty()) s += ", ";
    s += format_ablation(a);
  }
  return s;
}

std::vector<Ablation> to_ablations(const std::string& s) {
  std::vector<Ablation> out;
  for (const auto& p : split_list(s)) out.push_back(parse_ablation(p));
  return out;
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <class T>
Field uint_field(const char* sec, const char* key, T& ref) {
  return {sec, key, [&ref](const std::string& v) { ref = static_cast<T>(to_uint(v)); },
          [&ref] { return std::to_string(ref); }};
}

Field int_field(const char* sec, const char* key, int& ref) {
  return {sec, key,
          [&ref](const std::string& v) {
            const auto u = to_uint(v);
            if (u > 1000000) throw ConfigError("value too large");
            ref = static_cast<int>(u);
          },
          [&ref] { return std::to_string(ref); }};
}

Field real_field(const char* sec, const char* key, double& ref) {
  return {sec, key, [&ref](const std::string& v) { ref = to_double(v); },
          [&ref] { return fmt_double(ref); }};
}

Field bool_field(const char* sec, const char* key, bool& ref) {
  return {sec, key, [&ref](const std::string& v) { ref = to_bool(v); },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

Field triple_field(const char* sec, const char* key, std::array<double, 3>& ref) {
  return {sec, key, [&ref](const std::string& v) { ref = to_triple(v); },
          [&ref] { return fmt_triple(ref); }};
}

std::vector<Field> fields(ExperimentConfig& c) {
  auto& d = c.data;
  auto& t = c.training;
  auto& p = t.preference;
  return {
      {"run", "seed",
       [&c](const std::string& v) { c.set_seed(to_uint(v)); },
       [&c] { return std::to_string(c.training.seed); }},
      {"run", "out",
       [&c](const std::string& v) {
         if (v.empty()) c.out.reset();
         else c.out = v;
       },
       [&c] { return c.out ? c.out->string() : std::string(); }},
      {"run", "ablations", [&c](const std::string& v) { c.ablations = to_ablations(v); },
       [&c] { return fmt_ablations(c.ablations); }},
      {"run", "grid", [&c](const std::string& v) { c.grid = to_ablations(v); },
       [&c] { return fmt_ablations(c.grid); }},
      bool_field("run", "dynamics", c.dynamics),
      uint_field("run", "dynamics_pairs", c.dynamics_pairs),

      int_field("data", "vocab", d.vocab),
      uint_field("data", "corpus_size", d.corpus_size),
      uint_field("data", "context_length", d.context_length),
      uint_field("data", "min_length", d.min_length),
      uint_field("data", "max_length", d.max_length),
      real_field("data", "split_fraction", d.split_fraction),
      uint_field("data", "probe_size", d.probe_size),
      uint_field("data", "heldout_pool", d.heldout_pool),
      uint_field("data", "negatives_per_tier", d.negatives_per_tier),
      real_field("data", "mix_fraction", d.mix_fraction),
      triple_field("data", "tier_weights", d.tier_weights),

      int_field("model", "embed_dim", t.arch.embed_dim),
      int_field("model", "hidden_dim", t.arch.hidden_dim),
      int_field("model", "context_window", t.arch.context_window),
      int_field("model", "max_positions", t.arch.max_positions),
      real_field("model", "init_scale", t.init_scale),

      {"train", "optimizer", [&t](const std::string& v) { t.optimizer = parse_optimizer(v); },
       [&t] { return std::string(to_string(t.optimizer)); }},
      uint_field("train", "batch_size", t.batch_size),
      uint_field("train", "probe_interval", t.probe_interval),
      uint_field("train", "trace_interval", t.trace_interval),
      uint_field("train", "checkpoint_interval", t.checkpoint_interval),
      uint_field("train", "curriculum_fixtures", t.curriculum_fixtures),
      uint_field("train", "early_stop_patience", t.early_stop.patience),
      real_field("train", "early_stop_min_delta", t.early_stop.min_delta),

      {"stage1", "objective",
       [&t](const std::string& v) { t.stage1_objective = parse_stage1_objective(v); },
       [&t] { return std::string(to_string(t.stage1_objective)); }},
      uint_field("stage1", "steps", t.stage1_steps),
      real_field("stage1", "learning_rate", t.stage1_learning_rate),
      real_field("stage1", "lr_end_fraction", t.stage1_lr_end_fraction),
      real_field("stage1", "lambda", t.sft.lambda),
      real_field("stage1", "threshold", t.sft.threshold),
      {"stage1", "penalty", [&t](const std::string& v) { t.sft.mode = parse_penalty_mode(v); },
       [&t] { return std::string(to_string(t.sft.mode)); }},
      real_field("stage1", "label_smoothing", t.label_smoothing),
      triple_field("stage1", "tier_weights", t.stage1_tier_weights),

      {"stage2", "objective", [&p](const std::string& v) { p.kind = parse_objective(v); },
       [&p] { return std::string(to_string(p.kind)); }},
      uint_field("stage2", "steps", t.stage2_steps),
      real_field("stage2", "learning_rate", t.stage2_learning_rate),
      real_field("stage2", "beta", p.dpo.beta),
      real_field("stage2", "focal_gamma", p.focal_gamma),
      real_field("stage2", "floor", p.cooling.floor),
      real_field("stage2", "temperature", p.cooling.temperature),
      bool_field("stage2", "hard_filter", p.cooling.hard_filter),
      {"stage2", "fixed_weight",
       [&p](const std::string& v) {
         if (v.empty()) p.cooling.fixed_weight.reset();
         else p.cooling.fixed_weight = to_double(v);
       },
       [&p] { return p.cooling.fixed_weight ? fmt_double(*p.cooling.fixed_weight) : std::string(); }},
      bool_field("stage2", "stop_gradient", p.cooling.stop_gradient),
  };
}

constexpr std::pair<const char*, const char*> kRequired[] = {
    {"run", "seed"}, {"stage1", "objective"}, {"stage2", "objective"}};

}  // namespace

std::string_view to_string(AblationKind k) {
  for (const auto& n : kAblationNames)
    if (n.kind == k) return n.name;
  return "?";
}

Ablation parse_ablation(std::string_view s) {
  const std::string text = trim(s);
  const auto eq = text.find('=');
  const std::string name = trim(text.substr(0, eq));
  for (const auto& n : kAblationNames) {
    if (name != n.name) continue;
    Ablation a{n.kind, std::nullopt};
    if (eq != std::string::npos) {
      if (n.kind != AblationKind::fixed_cooling_weight)
        throw ConfigError("ablation '" + name + "' takes no value");
      a.value = to_double(trim(text.substr(eq + 1)));
    }
    if (n.kind == AblationKind::fixed_cooling_weight) {
      if (!a.value) a.value = 1.0;
      if (!(*a.value >= 0.0 && *a.value <= 1.0))
        throw ConfigError("fixed-cooling-weight must be in [0, 1]");
    }
    return a;
  }
  throw ConfigError("unknown ablation '" + name + "'");
}

std::string format_ablation(const Ablation& a) {
  std::string s(to_string(a.kind));
  if (a.value) s += "=" + fmt_double(*a.value);
  return s;
}

void check_ablations(const std::vector<Ablation>& list) {
  std::set<AblationKind> seen;
  for (const auto& a : list)
    if (!seen.insert(a.kind).second)
      throw ConfigError("ablation '" + std::string(to_string(a.kind)) + "' given twice");
  auto has = [&](AblationKind k) { return seen.count(k) > 0; };
  auto clash = [&](AblationKind a, AblationKind b) {
    if (has(a) && has(b))
      throw ConfigError("ablations '" + std::string(to_string(a)) + "' and '" +
                        std::string(to_string(b)) + "' are mutually exclusive");
  };
  using K = AblationKind;
  clash(K::no_smooth_sft, K::no_negative_sampling);
  clash(K::no_smooth_sft, K::hard_constraint);
  clash(K::no_negative_sampling, K::hard_constraint);
  clash(K::no_cw_dpo, K::fixed_cooling_weight);
  clash(K::no_cw_dpo, K::no_negative_filtering);
  clash(K::no_smooth_sft, K::no_cw_dpo);
}

TrainingConfig apply_ablations(TrainingConfig cfg, const std::vector<Ablation>& list) {
  check_ablations(list);
  for (const auto& a : list) {
    switch (a.kind) {
      case AblationKind::no_smooth_sft:
        cfg.stage1_steps = 0;
        break;
      case AblationKind::no_negative_sampling:
        cfg.stage1_objective = Stage1Objective::sft;
        break;
      case AblationKind::hard_constraint:
        cfg.stage1_objective = Stage1Objective::sft_c;
        cfg.sft.mode = PenaltyMode::hard_constraint;
        break;
      case AblationKind::no_cw_dpo:
        cfg.stage2_steps = 0;
        break;
      case AblationKind::fixed_cooling_weight:
        cfg.preference.kind = Objective::cw_dpo;
        cfg.preference.cooling.fixed_weight = a.value.value_or(1.0);
        break;
      case AblationKind::no_negative_filtering:
        cfg.preference.cooling.hard_filter = false;
        break;
    }
  }
  return cfg;
}

void ExperimentConfig::set_seed(std::uint64_t seed) {
  data.seed = seed;
  training.seed = seed;
}

TrainingConfig ExperimentConfig::resolved() const {
  TrainingConfig t = apply_ablations(training, ablations);
  t.arch.vocab = data.vocab;
  return t;
}

void ExperimentConfig::validate() const {
  data.validate();
  check_ablations(ablations);
  for (const auto& g : grid) {
    auto combined = ablations;
    combined.push_back(g);
    check_ablations(combined);
  }
  if (static_cast<std::size_t>(training.arch.max_positions) < data.max_length)
    throw ConfigError("model.max_positions must be >= data.max_length");
  resolved().validate();
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig c;
  auto table = fields(c);
  std::map<std::pair<std::string, std::string>, std::size_t> seen;
  std::set<std::string> sections;
  for (const auto& f : table) sections.insert(f.section);

  std::string section;
  std::size_t lineno = 0;
  std::istringstream is{std::string(text)};
  std::string raw;
  while (std::getline(is, raw)) {
    ++lineno;
    std::string line = raw;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigParseError(lineno, "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!sections.count(section))
        throw ConfigParseError(lineno, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigParseError(lineno, "expected 'key = value'");
    if (section.empty()) throw ConfigParseError(lineno, "key outside of any section");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    Field* field = nullptr;
    for (auto& f : table)
      if (section == f.section && key == f.key) field = &f;
    if (!field) throw ConfigParseError(lineno, "unknown key '" + key + "' in [" + section + "]");
    if (auto it = seen.find({section, key}); it != seen.end())
      throw ConfigParseError(lineno, section + "." + key + " already set on line " +
                                         std::to_string(it->second));
    seen[{section, key}] = lineno;
    try {
      field->set(value);
    } catch (const ConfigError& e) {
      throw ConfigParseError(lineno, section + "." + key + ": " + e.what());
    }
  }
  for (const auto& [sec, key] : kRequired)
    if (!seen.count({sec, key}))
      throw ConfigParseError(0, std::string("missing required field ") + sec + "." + key);

  c.training.arch.vocab = c.data.vocab;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigParseError(0, e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  const auto table = fields(copy);
  std::string out;
  const char* section = nullptr;
  for (const auto& f : table) {
    if (!section || std::string_view(section) != f.section) {
      if (section) out += '\n';
      section = f.section;
      out += "[" + std::string(section) + "]\n";
    }
    out += std::string(f.key) + " = " + f.get() + "\n";
  }
  return out;
}

}  // namespace cwdpo
