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

#include <cstdint>
#include <initializer_list>
#include <algorithm>
#include <compare>
#include <span>
#include <string>
#include <vector>

#include "cwdpo/errors.hpp"

namespace cwdpo {

using Token = std::int32_t;

struct Vocabulary {
  int size = 0;

  explicit Vocabulary(int n) : size(n) {
    if (n < 2) throw InputError("vocabulary size must be >= 2");
  }
  bool contains(Token t) const { return t >= 0 && t < size; }
};

/// Non-empty ordered list of token ids.
class TokenSequence {
 public:
  TokenSequence(std::vector<Token> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.empty()) throw InputError("token sequence must be non-empty");
  }
  TokenSequence(std::initializer_list<Token> tokens)
      : TokenSequence(std::vector<Token>(tokens)) {}

  std::size_t size() const { return tokens_.size(); }
  Token operator[](std::size_t i) const { return tokens_[i]; }
  std::span<const Token> tokens() const { return tokens_; }
  const std::vector<Token>& vec() const { return tokens_; }
  auto begin() const { return tokens_.begin(); }
  auto end() const { return tokens_.end(); }

  /// Throws InputError unless every token is < vocab.
  void check_vocabulary(int vocab) const {
    for (Token t : tokens_)
      if (t < 0 || t >= vocab)
        throw InputError("token " + std::to_string(t) +
                         " outside vocabulary of size " + std::to_string(vocab));
  }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
  friend auto operator<=>(const TokenSequence& a, const TokenSequence& b) {
    return a.tokens_ <=> b.tokens_;
  }

 private:
  std::vector<Token> tokens_;
};

inline std::size_t hamming_distance(const TokenSequence& a, const TokenSequence& b) {
  const std::size_t n = std::min(a.size(), b.size());
  std::size_t d = std::max(a.size(), b.size()) - n;
  for (std::size_t i = 0; i < n; ++i) d += a[i] != b[i];
  return d;
}

}  // namespace cwdpo
