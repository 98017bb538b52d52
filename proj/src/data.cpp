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

#include "cwdpo/data.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <string>

#include "json.hpp"

#include "cwdpo/errors.hpp"

namespace cwdpo {

Grammar::Grammar(int vocab) : vocab_(vocab) {
  if (vocab < 8 || vocab % 2 != 0)
    throw ConfigError("grammar needs an even vocabulary of at least 8 tokens");
}

std::array<Token, 2> Grammar::successors(Token prev) const {
  const int h = half();
  if (prev < h) {
    return {static_cast<Token>(h + (3 * prev + 1) % h), static_cast<Token>(h + (3 * prev + 2) % h)};
  }
  const int b = prev - h;
  return {static_cast<Token>((5 * b + 3) % h), static_cast<Token>((5 * b + 4) % h)};
}

bool Grammar::allowed(Token prev, Token next) const {
  const auto s = successors(prev);
  return next == s[0] || next == s[1];
}

int Grammar::rule_violations(const TokenSequence& context, const TokenSequence& y) const {
  int v = 0;
  Token prev = context[context.size() - 1];
  for (Token t : y) {
    v += !allowed(prev, t);
    prev = t;
  }
  return v;
}

int Grammar::class_violations(const TokenSequence& context, const TokenSequence& y) const {
  int v = 0;
  Token prev = context[context.size() - 1];
  for (Token t : y) {
    v += token_class(prev) == token_class(t);
    prev = t;
  }
  return v;
}

std::string_view to_string(Tier t) {
  switch (t) {
    case Tier::easy: return "easy";
    case Tier::medium: return "medium";
    case Tier::hard: return "hard";
  }
  return "?";
}

std::string_view to_string(Provenance p) {
  return p == Provenance::dataset ? "dataset" : "on-policy";
}

Tier parse_tier(std::string_view s) {
  if (s == "easy") return Tier::easy;
  if (s == "medium") return Tier::medium;
  if (s == "hard") return Tier::hard;
  throw InputError("unknown tier '" + std::string(s) + "'");
}

Provenance parse_provenance(std::string_view s) {
  if (s == "dataset") return Provenance::dataset;
  if (s == "on-policy") return Provenance::on_policy;
  throw InputError("unknown provenance '" + std::string(s) + "'");
}

std::vector<const Negative*> LabeledExample::negatives_of(Tier t) const {
  std::vector<const Negative*> out;
  for (const auto& n : negatives)
    if (n.tier.tier == t) out.push_back(&n);
  return out;
}

void DatasetSpec::validate() const {
  Grammar{vocab};
  if (corpus_size < 2) throw ConfigError("dataset: corpus_size must be >= 2");
  if (context_length < 1) throw ConfigError("dataset: context_length must be >= 1");
  if (min_length < 1 || max_length < min_length)
    throw ConfigError("dataset: need 1 <= min_length <= max_length");
  if (!(split_fraction > 0.0 && split_fraction < 1.0))
    throw ConfigError("dataset: split_fraction must be in (0, 1)");
  if (!(mix_fraction >= 0.0 && mix_fraction <= 1.0))
    throw ConfigError("dataset: mix_fraction must be in [0, 1]");
  if (negatives_per_tier < 1) throw ConfigError("dataset: negatives_per_tier must be >= 1");
  if (probe_size < 1) throw ConfigError("dataset: probe_size must be >= 1");
  if (probe_size > heldout_pool)
    throw ConfigError("dataset: probe_size " + std::to_string(probe_size) +
                      " exceeds the held-out pool of " + std::to_string(heldout_pool));
  double w = 0.0;
  for (double x : tier_weights) {
    if (x < 0.0) throw ConfigError("dataset: tier weights must be non-negative");
    w += x;
  }
  if (w <= 0.0) throw ConfigError("dataset: tier weights must not all be zero");
}

Tier classify_tier(const Grammar& g, const TokenSequence& context, const TokenSequence& positive,
                   const TokenSequence& negative) {
  if (g.class_violations(context, negative) == 0) return Tier::hard;
  const std::size_t half_len = (positive.size() + 1) / 2;
  return hamming_distance(positive, negative) >= half_len ? Tier::easy : Tier::medium;
}

namespace {

Token pick_from_class(const Grammar& g, int cls, Rng& rng) {
  return static_cast<Token>(cls * g.half() + static_cast<int>(rng.below(g.half())));
}

TokenSequence random_chain(const Grammar& g, Token start, std::size_t length, Rng& rng) {
  std::vector<Token> out;
  out.reserve(length);
  Token prev = start;
  for (std::size_t i = 0; i < length; ++i) {
    prev = g.successors(prev)[rng.below(2)];
    out.push_back(prev);
  }
  return TokenSequence(std::move(out));
}

std::vector<std::size_t> choose_positions(std::size_t n, std::size_t m, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

LabeledExample make_example(const Grammar& g, const DatasetSpec& spec, Rng& rng) {
  const Token start = static_cast<Token>(rng.below(g.vocab()));
  std::vector<Token> ctx{start};
  if (spec.context_length > 1) {
    const auto tail = random_chain(g, start, spec.context_length - 1, rng);
    ctx.insert(ctx.end(), tail.begin(), tail.end());
  }
  const std::size_t len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
  TokenSequence context(std::move(ctx));
  TokenSequence positive = random_chain(g, context[context.size() - 1], len, rng);
  return LabeledExample{std::move(context), std::move(positive), {}};
}

void attach_negatives(const Grammar& g, const DatasetSpec& spec, LabeledExample& ex, Rng& rng) {
  for (Tier t : kAllTiers) {
    if (t == Tier::medium && ex.positive.size() < 2) continue;
    for (auto& seq : synthesize_tiered_negatives(g, ex, t, spec.negatives_per_tier, rng.next()))
      ex.negatives.push_back({std::move(seq), {t, Provenance::dataset}});
  }
}

using ExampleKey = std::pair<std::vector<Token>, std::vector<Token>>;
ExampleKey key_of(const LabeledExample& e) { return {e.context.vec(), e.positive.vec()}; }

}  // namespace

std::vector<TokenSequence> synthesize_tiered_negatives(const Grammar& g,
                                                       const LabeledExample& example,
                                                       Tier tier, std::size_t count,
                                                       std::uint64_t seed) {
  if (count < 1) throw ConfigError("synthesize_tiered_negatives: count must be >= 1");
  const TokenSequence& pos = example.positive;
  const std::size_t len = pos.size();
  if (tier == Tier::medium && len < 2)
    throw GenerationError("medium negatives need at least two positions");
  Rng rng(seed);
  const Token ctx_last = example.context[example.context.size() - 1];
  auto prev_of = [&](std::size_t i) { return i == 0 ? ctx_last : pos[i - 1]; };

  std::vector<TokenSequence> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    std::vector<Token> y = pos.vec();
    switch (tier) {
      case Tier::hard: {
        // One same-class substitution that is not an allowed successor.
        const std::size_t i = rng.below(len);
        const int cls = g.token_class(pos[i]);
        Token t;
        do {
          t = pick_from_class(g, cls, rng);
        } while (g.allowed(prev_of(i), t));
        y[i] = t;
        break;
      }
      case Tier::medium: {
        for (std::size_t i : choose_positions(len, 2, rng))
          y[i] = pick_from_class(g, 1 - g.token_class(pos[i]), rng);
        break;
      }
      case Tier::easy: {
        const std::size_t lo = (len + 1) / 2;
        const std::size_t hi = std::max(lo, (3 * len + 3) / 4);
        const std::size_t m = lo + rng.below(hi - lo + 1);
        for (std::size_t i : choose_positions(len, m, rng))
          y[i] = pick_from_class(g, 1 - g.token_class(pos[i]), rng);
        break;
      }
    }
    out.emplace_back(std::move(y));
  }
  return out;
}

std::vector<LabeledExample> generate_corpus(const DatasetSpec& spec) {
  spec.validate();
  const Grammar g(spec.vocab);
  Rng rng(derive_seed(spec.seed, "corpus"));
  std::vector<LabeledExample> corpus;
  corpus.reserve(spec.corpus_size);
  for (std::size_t i = 0; i < spec.corpus_size; ++i) {
    LabeledExample ex = make_example(g, spec, rng);
    attach_negatives(g, spec, ex, rng);
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

std::vector<LabeledExample> build_probe_set(const DatasetSpec& spec) {
  spec.validate();
  if (spec.probe_size > spec.heldout_pool)
    throw ConfigError("probe_size " + std::to_string(spec.probe_size) +
                      " exceeds the held-out pool of " + std::to_string(spec.heldout_pool));
  const Grammar g(spec.vocab);
  std::set<ExampleKey> seen;
  for (const auto& e : generate_corpus(spec)) seen.insert(key_of(e));

  Rng rng(derive_seed(spec.seed, "heldout"));
  std::vector<LabeledExample> pool;
  pool.reserve(spec.heldout_pool);
  std::size_t attempts = 0;
  while (pool.size() < spec.heldout_pool) {
    if (++attempts > 100 * spec.heldout_pool + 1000)
      throw ConfigError("grammar too small to draw a disjoint held-out pool");
    LabeledExample ex = make_example(g, spec, rng);
    if (!seen.insert(key_of(ex)).second) continue;
    attach_negatives(g, spec, ex, rng);
    pool.push_back(std::move(ex));
  }
  pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(spec.probe_size), pool.end());
  return pool;
}

CorpusSplit split_corpus(std::vector<LabeledExample> corpus, double split_fraction) {
  if (!(split_fraction > 0.0 && split_fraction < 1.0))
    throw ConfigError("split_fraction must be in (0, 1)");
  const auto cut = static_cast<std::size_t>(split_fraction * static_cast<double>(corpus.size()));
  CorpusSplit s;
  s.stage1.assign(std::make_move_iterator(corpus.begin()),
                  std::make_move_iterator(corpus.begin() + cut));
  s.stage2.assign(std::make_move_iterator(corpus.begin() + cut),
                  std::make_move_iterator(corpus.end()));
  return s;
}

std::vector<Negative> sample_on_policy_negatives(const PolicyParameters& params, const Grammar& g,
                                                 const LabeledExample& example, std::size_t k,
                                                 std::uint64_t seed) {
  if (k < 1) throw ConfigError("sample_on_policy_negatives: k must be >= 1");
  auto beams = beam_search(params, example.context, example.positive.size(), kOnPolicyBeamWidth);
  std::vector<Negative> survivors;
  for (auto& b : beams) {
    if (b.tokens == example.positive) continue;
    const Tier t = classify_tier(g, example.context, example.positive, b.tokens);
    survivors.push_back({std::move(b.tokens), {t, Provenance::on_policy}});
  }
  Rng rng(seed);
  for (std::size_t i = 0; i + 1 < survivors.size(); ++i)
    std::swap(survivors[i], survivors[i + rng.below(survivors.size() - i)]);
  if (survivors.size() > k) survivors.erase(survivors.begin() + static_cast<std::ptrdiff_t>(k), survivors.end());
  return survivors;
}

const Negative& pick_dataset_negative(const LabeledExample& example,
                                      const std::array<double, 3>& tier_weights, Rng& rng) {
  if (example.negatives.empty()) throw InputError("example has no dataset negatives");
  std::array<double, 3> w{};
  double total = 0.0;
  for (Tier t : kAllTiers) {
    const bool present = !example.negatives_of(t).empty();
    w[tier_index(t)] = present ? tier_weights[tier_index(t)] : 0.0;
    total += w[tier_index(t)];
  }
  if (total <= 0.0) {
    // Only tiers with zero weight are present.
    return example.negatives[rng.below(example.negatives.size())];
  }
  double r = rng.uniform() * total;
  Tier chosen = Tier::hard;
  for (Tier t : kAllTiers) {
    if (w[tier_index(t)] <= 0.0) continue;
    chosen = t;
    r -= w[tier_index(t)];
    if (r < 0.0) break;
  }
  const auto pool = example.negatives_of(chosen);
  return *pool[rng.below(pool.size())];
}

std::vector<PreferencePair> build_preference_batch(std::span<const LabeledExample> corpus,
                                                   const PolicyParameters& params,
                                                   const Grammar& g, const BatchOptions& options,
                                                   std::uint64_t seed) {
  if (!(options.mix_fraction >= 0.0 && options.mix_fraction <= 1.0))
    throw ConfigError("mix fraction must be in [0, 1]");
  if (corpus.empty()) throw InputError("build_preference_batch: empty corpus");
  Rng rng(seed);
  std::vector<PreferencePair> batch;
  batch.reserve(options.batch_size);
  for (std::size_t i = 0; i < options.batch_size; ++i) {
    const LabeledExample& ex = corpus[rng.below(corpus.size())];
    const bool from_dataset = rng.bernoulli(options.mix_fraction);
    const std::uint64_t pair_seed = rng.next();
    if (!from_dataset) {
      auto found = sample_on_policy_negatives(params, g, ex, 1, pair_seed);
      if (!found.empty()) {
        batch.push_back({ex.context, ex.positive, std::move(found.front().tokens), found.front().tier});
        continue;
      }
    }
    Rng pick(pair_seed);
    const Negative& n = pick_dataset_negative(ex, options.tier_weights, pick);
    batch.push_back({ex.context, ex.positive, n.tokens, n.tier});
  }
  return batch;
}

BatchStatistics batch_statistics(std::span<const PreferencePair> batch) {
  BatchStatistics s;
  for (const auto& p : batch) {
    ++s.pairs;
    (p.loser_tier.provenance == Provenance::dataset ? s.dataset : s.on_policy)++;
    ++s.by_tier[tier_index(p.loser_tier.tier)];
  }
  return s;
}

std::uint64_t fingerprint(std::span<const LabeledExample> examples) {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  auto feed = [&](std::uint64_t x) { h = mix64(h ^ x); };
  for (const auto& e : examples) {
    for (Token t : e.context) feed(static_cast<std::uint64_t>(t));
    feed(0xffff);
    for (Token t : e.positive) feed(static_cast<std::uint64_t>(t));
    feed(0xfffe);
    for (const auto& n : e.negatives) {
      for (Token t : n.tokens) feed(static_cast<std::uint64_t>(t));
      feed(0x1000 + tier_index(n.tier.tier) * 2 + (n.tier.provenance == Provenance::dataset));
    }
    feed(0xfffd);
  }
  return h;
}

void write_examples(std::ostream& os, std::span<const LabeledExample> examples) {
  for (const auto& e : examples) {
    nlohmann::json j;
    j["context"] = e.context.vec();
    j["positive"] = e.positive.vec();
    j["negatives"] = nlohmann::json::array();
    for (const auto& n : e.negatives)
      j["negatives"].push_back({{"tokens", n.tokens.vec()},
                                {"tier", to_string(n.tier.tier)},
                                {"provenance", to_string(n.tier.provenance)}});
    os << j.dump() << '\n';
  }
}

std::vector<LabeledExample> read_examples(std::istream& is) {
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      LabeledExample e{TokenSequence(j.at("context").get<std::vector<Token>>()),
                       TokenSequence(j.at("positive").get<std::vector<Token>>()),
                       {}};
      for (const auto& n : j.at("negatives"))
        e.negatives.push_back({TokenSequence(n.at("tokens").get<std::vector<Token>>()),
                               {parse_tier(n.at("tier").get<std::string>()),
                                parse_provenance(n.at("provenance").get<std::string>())}});
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw InputError("examples line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace cwdpo
