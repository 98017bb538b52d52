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

#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cwdpo/policy.hpp"
#include "cwdpo/rng.hpp"
#include "cwdpo/tokens.hpp"

namespace cwdpo {

/// Synthetic regular language used for positives.
///
/// Tokens split into two classes, A = [0, V/2) and B = [V/2, V). A valid
/// sequence alternates classes and every token is one of the two allowed
/// successors of the token before it:
///   a in A -> V/2 + (3a + 1) mod V/2  or  V/2 + (3a + 2) mod V/2
///   b in B -> (5(b - V/2) + 3) mod V/2  or  (5(b - V/2) + 4) mod V/2
/// A perfect model therefore has next-token entropy ln 2 on positives.
class Grammar {
 public:
  explicit Grammar(int vocab);

  int vocab() const { return vocab_; }
  int half() const { return vocab_ / 2; }
  int token_class(Token t) const { return t < half() ? 0 : 1; }
  std::array<Token, 2> successors(Token prev) const;
  bool allowed(Token prev, Token next) const;

  /// Transitions in `y` (conditioned on the last context token) that are not
  /// allowed successors.
  int rule_violations(const TokenSequence& context, const TokenSequence& y) const;
  /// Transitions that break class alternation (a subset of rule violations).
  int class_violations(const TokenSequence& context, const TokenSequence& y) const;
  bool accepts(const TokenSequence& context, const TokenSequence& y) const {
    return rule_violations(context, y) == 0;
  }

 private:
  int vocab_;
};

enum class Tier { easy, medium, hard };
enum class Provenance { dataset, on_policy };

inline constexpr std::array<Tier, 3> kAllTiers{Tier::easy, Tier::medium, Tier::hard};

std::string_view to_string(Tier t);
std::string_view to_string(Provenance p);
Tier parse_tier(std::string_view s);
Provenance parse_provenance(std::string_view s);
inline std::size_t tier_index(Tier t) { return static_cast<std::size_t>(t); }

struct NegativeTier {
  Tier tier = Tier::easy;
  Provenance provenance = Provenance::dataset;
  friend bool operator==(const NegativeTier&, const NegativeTier&) = default;
};

struct Negative {
  TokenSequence tokens;
  NegativeTier tier;
  friend bool operator==(const Negative&, const Negative&) = default;
};

/// Context x, positive y+, and tiered negatives (each differs from y+).
struct LabeledExample {
  TokenSequence context;
  TokenSequence positive;
  std::vector<Negative> negatives;

  std::vector<const Negative*> negatives_of(Tier t) const;
  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

struct PreferencePair {
  TokenSequence context;
  TokenSequence winner;
  TokenSequence loser;
  NegativeTier loser_tier;
};

struct DatasetSpec {
  int vocab = 32;
  std::size_t corpus_size = 2000;
  std::size_t context_length = 2;
  std::size_t min_length = 16;
  std::size_t max_length = 24;
  double split_fraction = 0.75;     // Stage-1 share of the corpus
  std::size_t probe_size = 256;
  std::size_t heldout_pool = 512;   // held-out examples available for probing
  std::size_t negatives_per_tier = 2;
  double mix_fraction = 0.5;        // rho: share of Stage-2 losers from the dataset
  std::array<double, 3> tier_weights{0.6, 0.25, 0.15};  // easy, medium, hard
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

/// Classifies a negative: no class violations -> hard; otherwise Hamming
/// distance >= ceil(L/2) -> easy; otherwise medium.
Tier classify_tier(const Grammar& g, const TokenSequence& context,
                   const TokenSequence& positive, const TokenSequence& negative);

std::vector<LabeledExample> generate_corpus(const DatasetSpec& spec);

/// Throws GenerationError when the tier's edit cannot be made (medium needs
/// two positions) and ConfigError when count < 1.
std::vector<TokenSequence> synthesize_tiered_negatives(const Grammar& g,
                                                       const LabeledExample& example,
                                                       Tier tier, std::size_t count,
                                                       std::uint64_t seed);

inline constexpr int kOnPolicyBeamWidth = 5;

/// Beam-search candidates from the current policy with y+ removed, of which
/// up to `k` are kept in seeded random order. May be empty.
std::vector<Negative> sample_on_policy_negatives(const PolicyParameters& params,
                                                 const Grammar& g,
                                                 const LabeledExample& example,
                                                 std::size_t k, std::uint64_t seed);

/// Picks one dataset negative by tier weights (falling back to any tier
/// with negatives when the drawn tier is empty).
const Negative& pick_dataset_negative(const LabeledExample& example,
                                      const std::array<double, 3>& tier_weights, Rng& rng);

struct BatchOptions {
  double mix_fraction = 0.5;
  std::size_t batch_size = 32;
  std::array<double, 3> tier_weights{0.6, 0.25, 0.15};
};

/// Each pair draws an example uniformly, then Bernoulli(rho) for a dataset
/// loser; otherwise an on-policy loser, with dataset fallback when beam
/// search returns nothing new.
std::vector<PreferencePair> build_preference_batch(std::span<const LabeledExample> corpus,
                                                   const PolicyParameters& params,
                                                   const Grammar& g,
                                                   const BatchOptions& options,
                                                   std::uint64_t seed);

struct BatchStatistics {
  std::size_t pairs = 0;
  std::size_t dataset = 0;
  std::size_t on_policy = 0;
  std::array<std::size_t, 3> by_tier{};
  double dataset_fraction() const {
    return pairs ? static_cast<double>(dataset) / static_cast<double>(pairs) : 0.0;
  }
};
BatchStatistics batch_statistics(std::span<const PreferencePair> batch);

/// Held-out examples disjoint (by context + positive) from generate_corpus(spec).
std::vector<LabeledExample> build_probe_set(const DatasetSpec& spec);

struct CorpusSplit {
  std::vector<LabeledExample> stage1;
  std::vector<LabeledExample> stage2;
};
CorpusSplit split_corpus(std::vector<LabeledExample> corpus, double split_fraction);

/// Stable 64-bit hash of a list of examples.
std::uint64_t fingerprint(std::span<const LabeledExample> examples);

// Line-delimited JSON, one example per line:
//   {"context":[..],"positive":[..],"negatives":[{"tokens":[..],"tier":"hard","provenance":"dataset"}]}
void write_examples(std::ostream& os, std::span<const LabeledExample> examples);
std::vector<LabeledExample> read_examples(std::istream& is);

}  // namespace cwdpo
