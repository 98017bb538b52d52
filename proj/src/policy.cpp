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

#include "cwdpo/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>

#include "cwdpo/errors.hpp"
#include "cwdpo/rng.hpp"

namespace cwdpo {

std::size_t Architecture::parameter_count() const { return ParameterLayout::of(*this).total; }

void Architecture::validate() const {
  if (vocab < 2) throw ConfigError("architecture: vocab must be >= 2");
  if (hidden_dim < 0) throw ConfigError("architecture: hidden_dim must be >= 0");
  if (!is_linear()) {
    if (embed_dim < 1) throw ConfigError("architecture: embed_dim must be >= 1");
    if (context_window < 1) throw ConfigError("architecture: context_window must be >= 1");
    if (max_positions < 1) throw ConfigError("architecture: max_positions must be >= 1");
  }
}

ParameterLayout ParameterLayout::of(const Architecture& a) {
  ParameterLayout l;
  const std::size_t v = a.vocab;
  if (a.is_linear()) {
    l.w2 = 0;
    l.total = v * v;
    l.embedding = l.position = l.w1 = l.b1 = l.b2 = l.total;
    return l;
  }
  const std::size_t e = a.embed_dim, h = a.hidden_dim, p = a.max_positions;
  l.embedding = 0;
  l.position = l.embedding + v * e;
  l.w1 = l.position + p * e;
  l.b1 = l.w1 + h * 3 * e;
  l.w2 = l.b1 + h;
  l.b2 = l.w2 + v * h;
  l.total = l.b2 + v;
  return l;
}

PolicyParameters::PolicyParameters(Architecture arch)
    : arch_(arch), layout_(ParameterLayout::of(arch)) {
  arch_.validate();
  values_.assign(layout_.total, 0.0);
}

PolicyParameters::PolicyParameters(Architecture arch, std::vector<double> values)
    : arch_(arch), layout_(ParameterLayout::of(arch)), values_(std::move(values)) {
  arch_.validate();
  if (values_.size() != layout_.total)
    throw InputError("parameter vector has " + std::to_string(values_.size()) +
                     " entries, architecture needs " + std::to_string(layout_.total));
  if (!all_finite()) throw InputError("parameter vector contains non-finite entries");
}

PolicyParameters PolicyParameters::random(Architecture arch, std::uint64_t seed, double scale) {
  PolicyParameters p(arch);
  Rng rng(seed);
  for (double& v : p.values_) v = rng.uniform(-scale, scale);
  return p;
}

bool PolicyParameters::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::uint64_t PolicyParameters::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(values_.data());
  for (std::size_t i = 0; i < values_.size() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

void check_inputs(const PolicyParameters& params, const TokenSequence& context,
                  const TokenSequence& target) {
  context.check_vocabulary(params.arch().vocab);
  target.check_vocabulary(params.arch().vocab);
}

// Feature vector u for predicting the token after stream[0..end).
void build_features(const PolicyParameters& params, std::span<const Token> stream,
                    std::size_t end, std::size_t position, std::span<double> u) {
  const auto& a = params.arch();
  const auto& lay = params.layout();
  const std::size_t e = a.embed_dim;
  const std::size_t begin = end > static_cast<std::size_t>(a.context_window)
                                ? end - a.context_window
                                : 0;
  const double inv_n = 1.0 / static_cast<double>(end - begin);
  std::fill(u.begin(), u.end(), 0.0);
  for (std::size_t i = begin; i < end; ++i) {
    const double* row = &params[lay.embedding + stream[i] * e];
    for (std::size_t k = 0; k < e; ++k) u[k] += row[k];
  }
  for (std::size_t k = 0; k < e; ++k) u[k] *= inv_n;
  const double* last = &params[lay.embedding + stream[end - 1] * e];
  for (std::size_t k = 0; k < e; ++k) u[e + k] = last[k];
  const std::size_t pos = std::min<std::size_t>(position, a.max_positions - 1);
  const double* prow = &params[lay.position + pos * e];
  for (std::size_t k = 0; k < e; ++k) u[2 * e + k] = prow[k];
}

// Hidden activations and logits from features.
void mlp_head(const PolicyParameters& params, std::span<const double> u, std::span<double> h,
              std::span<double> z) {
  const auto& a = params.arch();
  const auto& lay = params.layout();
  const std::size_t in = 3 * static_cast<std::size_t>(a.embed_dim);
  for (int j = 0; j < a.hidden_dim; ++j) {
    const double* w = &params[lay.w1 + j * in];
    double acc = params[lay.b1 + j];
    for (std::size_t k = 0; k < in; ++k) acc += w[k] * u[k];
    h[j] = std::tanh(acc);
  }
  for (int v = 0; v < a.vocab; ++v) {
    const double* w = &params[lay.w2 + static_cast<std::size_t>(v) * a.hidden_dim];
    double acc = params[lay.b2 + v];
    for (int j = 0; j < a.hidden_dim; ++j) acc += w[j] * h[j];
    z[v] = acc;
  }
}

void linear_head(const PolicyParameters& params, Token prev, std::span<double> z) {
  const int v = params.arch().vocab;
  for (int r = 0; r < v; ++r) z[r] = params[static_cast<std::size_t>(r) * v + prev];
}

}  // namespace

ForwardTrace forward(const PolicyParameters& params, const TokenSequence& context,
                     const TokenSequence& target) {
  check_inputs(params, context, target);
  const auto& a = params.arch();
  ForwardTrace t;
  t.context_length = context.size();
  t.stream.reserve(context.size() + target.size());
  t.stream.insert(t.stream.end(), context.begin(), context.end());
  t.stream.insert(t.stream.end(), target.begin(), target.end());
  const std::size_t len = target.size();
  t.logits.vocab = a.vocab;
  t.logits.length = len;
  t.logits.values.assign(len * a.vocab, 0.0);

  if (a.is_linear()) {
    for (std::size_t l = 0; l < len; ++l)
      linear_head(params, t.stream[t.context_length + l - 1], t.logits.row(l));
    return t;
  }
  const std::size_t in = 3 * static_cast<std::size_t>(a.embed_dim);
  t.features.assign(len * in, 0.0);
  t.hidden.assign(len * a.hidden_dim, 0.0);
  for (std::size_t l = 0; l < len; ++l) {
    std::span<double> u{t.features.data() + l * in, in};
    std::span<double> h{t.hidden.data() + l * a.hidden_dim,
                        static_cast<std::size_t>(a.hidden_dim)};
    build_features(params, t.stream, t.context_length + l, l, u);
    mlp_head(params, u, h, t.logits.row(l));
  }
  return t;
}

void backward(const PolicyParameters& params, const ForwardTrace& trace,
              std::span<const double> dlogits, std::span<double> grad) {
  const auto& a = params.arch();
  const auto& lay = params.layout();
  const std::size_t len = trace.logits.length;
  const std::size_t v = a.vocab;
  if (dlogits.size() != len * v) throw InputError("backward: dlogits shape mismatch");
  if (grad.size() != params.size()) throw InputError("backward: gradient shape mismatch");

  if (a.is_linear()) {
    for (std::size_t l = 0; l < len; ++l) {
      const Token prev = trace.stream[trace.context_length + l - 1];
      for (std::size_t r = 0; r < v; ++r) grad[r * v + prev] += dlogits[l * v + r];
    }
    return;
  }

  const std::size_t e = a.embed_dim, hd = a.hidden_dim, in = 3 * e;
  std::vector<double> dh(hd), da(hd), du(in);
  for (std::size_t l = 0; l < len; ++l) {
    const double* dz = &dlogits[l * v];
    const double* h = &trace.hidden[l * hd];
    const double* u = &trace.features[l * in];

    std::fill(dh.begin(), dh.end(), 0.0);
    for (std::size_t r = 0; r < v; ++r) {
      const double g = dz[r];
      if (g == 0.0) continue;
      grad[lay.b2 + r] += g;
      double* gw = &grad[lay.w2 + r * hd];
      const double* w = &params[lay.w2 + r * hd];
      for (std::size_t j = 0; j < hd; ++j) {
        gw[j] += g * h[j];
        dh[j] += g * w[j];
      }
    }
    std::fill(du.begin(), du.end(), 0.0);
    for (std::size_t j = 0; j < hd; ++j) {
      da[j] = dh[j] * (1.0 - h[j] * h[j]);
      if (da[j] == 0.0) continue;
      grad[lay.b1 + j] += da[j];
      double* gw = &grad[lay.w1 + j * in];
      const double* w = &params[lay.w1 + j * in];
      for (std::size_t k = 0; k < in; ++k) {
        gw[k] += da[j] * u[k];
        du[k] += da[j] * w[k];
      }
    }

    const std::size_t end = trace.context_length + l;
    const std::size_t begin =
        end > static_cast<std::size_t>(a.context_window) ? end - a.context_window : 0;
    const double inv_n = 1.0 / static_cast<double>(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      double* ge = &grad[lay.embedding + trace.stream[i] * e];
      for (std::size_t k = 0; k < e; ++k) ge[k] += du[k] * inv_n;
    }
    double* glast = &grad[lay.embedding + trace.stream[end - 1] * e];
    for (std::size_t k = 0; k < e; ++k) glast[k] += du[e + k];
    const std::size_t pos = std::min<std::size_t>(l, a.max_positions - 1);
    double* gp = &grad[lay.position + pos * e];
    for (std::size_t k = 0; k < e; ++k) gp[k] += du[2 * e + k];
  }
}

LogitSequence forward_logits(const PolicyParameters& params, const TokenSequence& context,
                             const TokenSequence& target) {
  return forward(params, context, target).logits;
}

std::vector<double> next_token_logits(const PolicyParameters& params,
                                      const TokenSequence& context,
                                      std::span<const Token> partial) {
  context.check_vocabulary(params.arch().vocab);
  const auto& a = params.arch();
  std::vector<Token> stream(context.begin(), context.end());
  for (Token t : partial) {
    if (t < 0 || t >= a.vocab) throw InputError("token outside vocabulary");
    stream.push_back(t);
  }
  std::vector<double> z(a.vocab);
  if (a.is_linear()) {
    linear_head(params, stream.back(), z);
    return z;
  }
  std::vector<double> u(3 * static_cast<std::size_t>(a.embed_dim)), h(a.hidden_dim);
  build_features(params, stream, stream.size(), partial.size(), u);
  mlp_head(params, u, h, z);
  return z;
}

void log_softmax_inplace(std::span<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  const double lse = m + std::log(s);
  for (double& v : z) v -= lse;
}

std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> p(z.begin(), z.end());
  log_softmax_inplace(p);
  for (double& v : p) v = std::exp(v);
  return p;
}

double shannon_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

void SequenceScore::add_logprob_logit_grad(double scale, std::span<double> out) const {
  const std::size_t v = trace.logits.vocab;
  const std::size_t len = length();
  const std::size_t ctx = trace.context_length;
  for (std::size_t l = 0; l < len; ++l) {
    const double* p = &probs[l * v];
    double* o = &out[l * v];
    for (std::size_t r = 0; r < v; ++r) o[r] -= scale * p[r];
    o[trace.stream[ctx + l]] += scale;
  }
}

SequenceScore score_sequence(const PolicyParameters& params, const TokenSequence& context,
                             const TokenSequence& target) {
  SequenceScore s;
  s.trace = forward(params, context, target);
  const std::size_t v = params.arch().vocab;
  const std::size_t len = target.size();
  s.probs = s.trace.logits.values;
  s.token_log_probs.resize(len);
  for (std::size_t l = 0; l < len; ++l) {
    std::span<double> row{s.probs.data() + l * v, v};
    log_softmax_inplace(row);
    s.token_log_probs[l] = row[target[l]];
    s.sum_log_prob += row[target[l]];
    for (double& x : row) x = std::exp(x);
  }
  return s;
}

double avg_token_log_prob(const PolicyParameters& params, const TokenSequence& context,
                          const TokenSequence& y) {
  return score_sequence(params, context, y).avg_log_prob();
}

double sequence_log_prob(const PolicyParameters& params, const TokenSequence& context,
                         const TokenSequence& y) {
  return score_sequence(params, context, y).sum_log_prob;
}

double predictive_entropy(const PolicyParameters& params, const TokenSequence& context,
                          const TokenSequence& target, std::size_t position) {
  if (position >= target.size()) throw InputError("predictive_entropy: position out of range");
  target.check_vocabulary(params.arch().vocab);
  const auto z = next_token_logits(params, context, target.tokens().first(position));
  return shannon_entropy(softmax(z));
}

std::vector<ScoredSequence> beam_search(const PolicyParameters& params,
                                        const TokenSequence& context, std::size_t length,
                                        int width) {
  if (width < 1) throw ConfigError("beam width must be >= 1");
  if (length < 1) throw InputError("beam search length must be >= 1");
  const int v = params.arch().vocab;
  struct Beam {
    std::vector<Token> tokens;
    double log_prob;
  };
  std::vector<Beam> beams{{{}, 0.0}};
  std::vector<Beam> expanded;
  for (std::size_t step = 0; step < length; ++step) {
    expanded.clear();
    for (const Beam& b : beams) {
      auto z = next_token_logits(params, context, b.tokens);
      log_softmax_inplace(z);
      for (int t = 0; t < v; ++t) {
        Beam nb{b.tokens, b.log_prob + z[t]};
        nb.tokens.push_back(t);
        expanded.push_back(std::move(nb));
      }
    }
    // Ties broken lexicographically so the result is a pure function of inputs.
    const std::size_t keep = std::min<std::size_t>(width, expanded.size());
    std::partial_sort(expanded.begin(), expanded.begin() + keep, expanded.end(),
                      [](const Beam& x, const Beam& y) {
                        if (x.log_prob != y.log_prob) return x.log_prob > y.log_prob;
                        return x.tokens < y.tokens;
                      });
    expanded.resize(keep);
    beams.swap(expanded);
  }
  std::vector<ScoredSequence> out;
  out.reserve(beams.size());
  for (auto& b : beams) out.push_back({TokenSequence(std::move(b.tokens)), b.log_prob});
  return out;
}

TokenSequence sample_sequence(const PolicyParameters& params, const TokenSequence& context,
                              std::size_t max_len, const SamplingStrategy& strategy) {
  if (max_len < 1) throw InputError("sample_sequence: max_len must be >= 1");
  switch (strategy.kind) {
    case SamplingKind::beam:
      return beam_search(params, context, max_len, strategy.beam_width).front().tokens;
    case SamplingKind::greedy: {
      std::vector<Token> out;
      for (std::size_t i = 0; i < max_len; ++i) {
        const auto z = next_token_logits(params, context, out);
        out.push_back(static_cast<Token>(std::max_element(z.begin(), z.end()) - z.begin()));
      }
      return TokenSequence(std::move(out));
    }
    case SamplingKind::top_k: {
      if (strategy.top_k < 1) throw ConfigError("top-k sampling needs k >= 1");
      Rng rng(strategy.seed);
      std::vector<Token> out;
      const int v = params.arch().vocab;
      const int k = std::min(strategy.top_k, v);
      std::vector<int> order(v);
      for (std::size_t i = 0; i < max_len; ++i) {
        const auto p = softmax(next_token_logits(params, context, out));
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
          return p[a] != p[b] ? p[a] > p[b] : a < b;
        });
        double mass = 0.0;
        for (int j = 0; j < k; ++j) mass += p[order[j]];
        double r = rng.uniform() * mass;
        Token pick = order[k - 1];
        for (int j = 0; j < k; ++j) {
          r -= p[order[j]];
          if (r < 0.0) {
            pick = order[j];
            break;
          }
        }
        out.push_back(pick);
      }
      return TokenSequence(std::move(out));
    }
  }
  throw ConfigError("unknown sampling strategy");
}

Eigen::MatrixXd logit_jacobian(const PolicyParameters& params, const TokenSequence& context,
                               const TokenSequence& target) {
  if (params.size() > kDenseJacobianCap)
    throw CapabilityError("dense Jacobian needs " + std::to_string(params.size()) +
                          " columns, above the cap of " + std::to_string(kDenseJacobianCap) +
                          "; use the matrix-free contraction instead");
  const ForwardTrace trace = forward(params, context, target);
  const std::size_t rows = trace.logits.values.size();
  Eigen::MatrixXd jac(rows, params.size());
  std::vector<double> seed(rows, 0.0), g(params.size());
  for (std::size_t r = 0; r < rows; ++r) {
    seed[r] = 1.0;
    std::fill(g.begin(), g.end(), 0.0);
    backward(params, trace, seed, g);
    jac.row(r) = Eigen::Map<const Eigen::RowVectorXd>(g.data(), g.size());
    seed[r] = 0.0;
  }
  return jac;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw InputError("parameter file truncated");
  return v;
}

}  // namespace

void write_parameters(std::ostream& os, const PolicyParameters& params) {
  os.write("CWDP", 4);
  put<std::uint32_t>(os, kParameterFormatVersion);
  const auto& a = params.arch();
  for (int f : {a.vocab, a.embed_dim, a.hidden_dim, a.context_window, a.max_positions})
    put<std::int32_t>(os, f);
  put<std::uint64_t>(os, params.size());
  os.write(reinterpret_cast<const char*>(params.values().data()),
           static_cast<std::streamsize>(params.size() * sizeof(double)));
}

PolicyParameters read_parameters(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CWDP", 4) != 0)
    throw InputError("not a parameter file (bad magic)");
  const auto version = get<std::uint32_t>(is);
  if (version != kParameterFormatVersion)
    throw InputError("unsupported parameter format version " + std::to_string(version));
  Architecture a;
  a.vocab = get<std::int32_t>(is);
  a.embed_dim = get<std::int32_t>(is);
  a.hidden_dim = get<std::int32_t>(is);
  a.context_window = get<std::int32_t>(is);
  a.max_positions = get<std::int32_t>(is);
  const auto count = get<std::uint64_t>(is);
  if (count != a.parameter_count()) throw InputError("parameter count does not match architecture");
  std::vector<double> values(count);
  if (!is.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(count * sizeof(double))))
    throw InputError("parameter file truncated");
  return PolicyParameters(a, std::move(values));
}

void save_parameters(const std::string& path, const PolicyParameters& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path + " for writing");
  write_parameters(os, params);
}

PolicyParameters load_parameters(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path);
  return read_parameters(is);
}

}  // namespace cwdpo
