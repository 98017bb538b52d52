# Copyright 2026 The cwdpo Authors
# SPDX-License-Identifier: Apache-2.0
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from ._cwdpo import (
    CapabilityError,
    ComparisonError,
    ConfigError,
    InputError,
    compare,
    cooling_weight,
    dynamics,
    expected_calibration_error,
    js_divergence,
    normalize_config,
    run,
    sigmoid,
    tv_distance,
)

__all__ = [
    "CapabilityError",
    "ComparisonError",
    "ConfigError",
    "InputError",
    "compare",
    "cooling_weight",
    "dynamics",
    "expected_calibration_error",
    "js_divergence",
    "normalize_config",
    "run",
    "sigmoid",
    "tv_distance",
]
