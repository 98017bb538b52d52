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

#include <stdexcept>
#include <string>

namespace cwdpo {

/// Malformed caller input: out-of-vocabulary token, empty sequence, bad shape.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value (beam width, split fraction, probe size, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The requested computation is not available at this size or in this mode.
class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operation called out of order (e.g. reference snapshot before Stage 1 ends).
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A negative of the requested tier cannot be built for this example.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss during training. `replay_path` names the serialized batch
/// when one was written.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::string replay_path = {})
      : std::runtime_error(what), replay_path_(std::move(replay_path)) {}
  const std::string& replay_path() const noexcept { return replay_path_; }

 private:
  std::string replay_path_;
};

/// Bundles that cannot be compared (different probe sets, architectures).
class ComparisonError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cwdpo
