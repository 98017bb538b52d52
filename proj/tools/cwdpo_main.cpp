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

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "cwdpo/config.hpp"
#include "cwdpo/errors.hpp"
#include "cwdpo/suite.hpp"

namespace {

enum Exit : int {
  kOk = 0,
  kUnexpected = 1,
  kUsage = 2,
  kConfig = 3,
  kInput = 4,
  kDivergence = 5,
  kComparison = 6,
  kCapability = 7,
  kProtocol = 8,
};

constexpr const char* kExitHelp =
    "Exit codes:\n"
    "  0  success\n"
    "  1  unexpected internal error\n"
    "  2  bad command line\n"
    "  3  invalid config (message names the line or field)\n"
    "  4  unreadable or malformed input files\n"
    "  5  training diverged (non-finite loss; offending batch saved in the output dir)\n"
    "  6  bundles cannot be compared\n"
    "  7  analysis not available for this bundle (e.g. adam optimizer)\n"
    "  8  protocol violation\n";

template <class F>
int guarded(F&& f) {
  try {
    f();
    return kOk;
  } catch (const cwdpo::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const cwdpo::DivergenceError& e) {
    std::cerr << "divergence: " << e.what();
    if (!e.replay_path().empty()) std::cerr << " (batch saved to " << e.replay_path() << ")";
    std::cerr << '\n';
    return kDivergence;
  } catch (const cwdpo::ComparisonError& e) {
    std::cerr << "comparison error: " << e.what() << '\n';
    return kComparison;
  } catch (const cwdpo::CapabilityError& e) {
    std::cerr << "capability error: " << e.what() << '\n';
    return kCapability;
  } catch (const cwdpo::ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << '\n';
    return kProtocol;
  } catch (const cwdpo::InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUnexpected;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage cooled preference finetuning on a synthetic grammar task"};
  app.footer(kExitHelp);
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> ablations;

  auto* run = app.add_subcommand("run", "Train from a config file and write a run bundle");
  std::string config_path;
  run->add_option("config", config_path, "INI config file")->required();
  run->add_option("--seed", seed, "Override run.seed");
  run->add_option("--out", out, "Output directory (overrides run.out)");
  run->add_option("--ablation", ablations, "name[=value]; repeatable")->take_all();
  run->add_flag("--print-config", "Print the resolved config and exit");

  auto* cmp = app.add_subcommand("compare", "Compare the probe series of two bundles");
  std::string dir_a, dir_b;
  cmp->add_option("dirA", dir_a)->required()->check(CLI::ExistingDirectory);
  cmp->add_option("dirB", dir_b)->required()->check(CLI::ExistingDirectory);
  cmp->add_option("--out", out, "Directory for compare.csv and compare.json (default: stdout)");

  auto* dyn = app.add_subcommand("dynamics", "Influence, component-norm and profile report");
  std::string bundle;
  bool eta_sweep = false;
  std::size_t pairs = 4;
  dyn->add_option("dir", bundle, "Run bundle")->required()->check(CLI::ExistingDirectory);
  dyn->add_flag("--eta-sweep", eta_sweep, "Add the step-halving table");
  dyn->add_option("--pairs", pairs, "Number of (updating, observing) pairs")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  if (*run) {
    return guarded([&] {
      auto cfg = cwdpo::load_config(config_path);
      if (seed) cfg.set_seed(*seed);
      for (const auto& a : ablations) cfg.ablations.push_back(cwdpo::parse_ablation(a));
      if (!out.empty()) cfg.out = out;
      cfg.validate();
      if (run->count("--print-config")) {
        std::cout << cwdpo::format_config(cfg);
        return;
      }
      if (!cfg.out) throw cwdpo::ConfigError("no output directory: set run.out or pass --out");
      cwdpo::run_experiment(cfg, *cfg.out);
      std::cout << "wrote " << cfg.out->string() << '\n';
    });
  }
  if (*cmp) {
    return guarded([&] {
      const auto r = cwdpo::compare_runs(dir_a, dir_b);
      if (out.empty()) {
        cwdpo::write_compare_csv(std::cout, r);
        return;
      }
      std::filesystem::create_directories(out);
      std::ofstream csv(std::filesystem::path(out) / "compare.csv");
      cwdpo::write_compare_csv(csv, r);
      std::ofstream(std::filesystem::path(out) / "compare.json")
          << cwdpo::compare_summary_json(r) << '\n';
      std::cout << "wrote " << out << '\n';
    });
  }
  return guarded([&] {
    cwdpo::DynamicsOptions opt;
    opt.pairs = pairs;
    opt.eta_sweep = eta_sweep;
    const auto r = cwdpo::run_dynamics_suite(bundle, opt);
    std::printf("median relative error %.3e at eta %.1e\n", r.median_relative_error, opt.eta);
    if (eta_sweep) std::printf("median step-halving ratio %.3f\n", r.median_halving_ratio);
    std::printf("max profile ratio error %.3e\n", r.max_profile_ratio_error);
  });
}
