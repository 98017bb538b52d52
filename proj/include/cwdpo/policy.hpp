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

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cwdpo/tokens.hpp"

namespace cwdpo {

/// Shape of the toy causal policy.
///
/// With `hidden_dim > 0` the policy is a single-hidden-layer model: for target
/// position l it builds the feature vector
///   u = [mean of token embeddings over the last `context_window` tokens,
///        embedding of the immediately preceding token,
///        position embedding of l]
/// then h = tanh(W1 u + b1) and logits z = W2 h + b2.
///
/// With `hidden_dim == 0` the policy is a linear bigram model z = W e_prev with
/// no bias, whose logit Jacobian is the fixed one-hot feature matrix.
struct Architecture {
  int vocab = 32;
  int embed_dim = 16;
  int hidden_dim = 32;
  int context_window = 1;
  int max_positions = 24;

  bool is_linear() const { return hidden_dim == 0; }
  std::size_t parameter_count() const;
  void validate() const;  // throws ConfigError

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Offsets of each weight block inside the flat parameter vector.
struct ParameterLayout {
  std::size_t embedding = 0;  // vocab x embed_dim
  std::size_t position = 0;   // max_positions x embed_dim
  std::size_t w1 = 0;         // hidden_dim x 3*embed_dim
  std::size_t b1 = 0;         // hidden_dim
  std::size_t w2 = 0;         // vocab x hidden_dim (vocab x vocab when linear)
  std::size_t b2 = 0;         // vocab
  std::size_t total = 0;

  static ParameterLayout of(const Architecture& arch);
};

/// Flat parameter vector for one architecture. Entries are always finite.
class PolicyParameters {
 public:
  explicit PolicyParameters(Architecture arch);  // all zeros
  PolicyParameters(Architecture arch, std::vector<double> values);

  /// Uniform in [-scale, scale] from `seed`.
  static PolicyParameters random(Architecture arch, std::uint64_t seed,
                                 double scale = 0.08);

  const Architecture& arch() const { return arch_; }
  const ParameterLayout& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  const double& operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  bool all_finite() const;
  /// FNV-1a over the raw bytes; used to detect reference drift.
  std::uint64_t fingerprint() const;

  friend bool operator==(const PolicyParameters& a, const PolicyParameters& b) {
    return a.arch_ == b.arch_ && a.values_ == b.values_;
  }

 private:
  Architecture arch_;
  ParameterLayout layout_;
  std::vector<double> values_;
};

/// Frozen copy of the policy taken at the end of Stage 1. Copies share the
/// same immutable storage.
class ReferenceSnapshot {
 public:
  explicit ReferenceSnapshot(PolicyParameters params)
      : params_(std::make_shared<const PolicyParameters>(std::move(params))) {}

  const PolicyParameters& params() const { return *params_; }
  std::uint64_t fingerprint() const { return params_->fingerprint(); }

 private:
  std::shared_ptr<const PolicyParameters> params_;
};

/// One logit vector of length `vocab` per target position, row-major.
struct LogitSequence {
  int vocab = 0;
  std::size_t length = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t l) const {
    return {values.data() + l * vocab, static_cast<std::size_t>(vocab)};
  }
  std::span<double> row(std::size_t l) {
    return {values.data() + l * vocab, static_cast<std::size_t>(vocab)};
  }
};

/// Forward activations kept for the reverse pass.
struct ForwardTrace {
  LogitSequence logits;
  std::vector<Token> stream;  // context followed by target
  std::size_t context_length = 0;
  std::vector<double> features;  // length x 3*embed_dim
  std::vector<double> hidden;     // length x hidden_dim
};

ForwardTrace forward(const PolicyParameters& params, const TokenSequence& context,
                     const TokenSequence& target);

/// Accumulates J^T dlogits into `grad` (size = params.size()).
/// `dlogits` has the same layout as trace.logits.values.
void backward(const PolicyParameters& params, const ForwardTrace& trace,
              std::span<const double> dlogits, std::span<double> grad);

LogitSequence forward_logits(const PolicyParameters& params,
                             const TokenSequence& context, const TokenSequence& target);

/// Logits for the token following `context ++ partial` (partial may be empty).
std::vector<double> next_token_logits(const PolicyParameters& params,
                                      const TokenSequence& context,
                                      std::span<const Token> partial);

void log_softmax_inplace(std::span<double> z);
std::vector<double> softmax(std::span<const double> z);
double shannon_entropy(std::span<const double> probs);

/// Per-token scoring of a target with the intermediates needed by the losses.
struct SequenceScore {
  ForwardTrace trace;
  std::vector<double> probs;             // length x vocab softmax
  std::vector<double> token_log_probs;   // log pi(y_l | prefix)
  double sum_log_prob = 0.0;

  std::size_t length() const { return token_log_probs.size(); }
  double avg_log_prob() const { return sum_log_prob / static_cast<double>(length()); }

  /// d(sum log pi(y))/dz = onehot(y_l) - softmax(z_l), scaled by `scale`,
  /// added into `out` (same layout as logits).
  void add_logprob_logit_grad(double scale, std::span<double> out) const;
};

SequenceScore score_sequence(const PolicyParameters& params, const TokenSequence& context,
                             const TokenSequence& target);

/// (1/L) sum_l log pi(y_l | x, y_<l); always <= 0.
double avg_token_log_prob(const PolicyParameters& params, const TokenSequence& context,
                          const TokenSequence& y);
double sequence_log_prob(const PolicyParameters& params, const TokenSequence& context,
                         const TokenSequence& y);

/// Entropy (nats) of the next-token distribution at target position
/// `position`, conditioned on context and target[0..position).
double predictive_entropy(const PolicyParameters& params, const TokenSequence& context,
                          const TokenSequence& target, std::size_t position);

enum class SamplingKind { greedy, top_k, beam };

struct SamplingStrategy {
  SamplingKind kind = SamplingKind::greedy;
  int top_k = 5;
  int beam_width = 5;
  std::uint64_t seed = 0;

  static SamplingStrategy greedy() { return {}; }
  static SamplingStrategy top_k_sampling(int k, std::uint64_t seed) {
    return {SamplingKind::top_k, k, 5, seed};
  }
  static SamplingStrategy beam(int width) { return {SamplingKind::beam, 5, width, 0}; }
};

struct ScoredSequence {
  TokenSequence tokens;
  double log_prob = 0.0;
};

/// Beam search over fixed-length continuations. Returns at most `width`
/// distinct sequences sorted by non-increasing log-probability.
std::vector<ScoredSequence> beam_search(const PolicyParameters& params,
                                        const TokenSequence& context,
                                        std::size_t length, int width);

/// Greedy / top-k produce one sequence of length max_len; beam returns the
/// best beam. Throws ConfigError for beam width < 1 or k < 1.
TokenSequence sample_sequence(const PolicyParameters& params, const TokenSequence& context,
                              std::size_t max_len, const SamplingStrategy& strategy);

inline constexpr std::size_t kDenseJacobianCap = 50'000;

/// Dense d z / d theta, shape (L*vocab) x params.size(), rows ordered
/// (position, vocab). Throws CapabilityError above kDenseJacobianCap.
Eigen::MatrixXd logit_jacobian(const PolicyParameters& params, const TokenSequence& context,
                               const TokenSequence& target);

// Binary checkpoint format (little-endian):
//   "CWDP" | u32 version | 5 x i32 architecture | u64 count | count x f64
inline constexpr std::uint32_t kParameterFormatVersion = 1;

void write_parameters(std::ostream& os, const PolicyParameters& params);
PolicyParameters read_parameters(std::istream& is);
void save_parameters(const std::string& path, const PolicyParameters& params);
PolicyParameters load_parameters(const std::string& path);

}  // namespace cwdpo
