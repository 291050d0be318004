// Copyright 2026 The Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moespec/analysis.hpp"
#include "moespec/simulator.hpp"

namespace moespec {

inline constexpr const char* kToolVersion = "0.1.0";

// Fully resolved experiment settings. Built from defaults, then a JSON config
// file, then command-line overrides.
struct ExperimentConfig {
  std::string preset = "olmoe-toy";
  ModelConfig model = ModelConfig::preset("olmoe-toy");
  std::uint64_t seed = 0;  // master seed; also the model seed
  DraftSpec draft;
  std::vector<std::size_t> tree_sizes{63};
  std::vector<std::size_t> budgets;  // empty until resolved; defaults to N/4, N/2, N
  std::vector<RankingMethod> methods{RankingMethod::Router};
  std::vector<CoveragePolicy> policies{CoveragePolicy::Substitution};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t gen_len = 64;
  std::size_t prompts = 2;  // prompts per seed
  std::size_t prompt_length = 16;
  std::size_t trees = 20;   // trees for coverage / coactivation / reconstruct / union growth
  std::size_t calibration_tokens = 2048;
  bool uses_raw_g = true;
  ReconstructionMode reconstruction_mode = ReconstructionMode::Raw;
  CostModelParams cost;
  std::optional<std::string> static_ranking_file;
  std::optional<std::string> trace_file;
  bool dump_steps = false;
  std::string out_dir = "out";
  int workers = 1;

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

/// Applies a JSON object on top of `base`. Unknown keys are rejected.
ExperimentConfig apply_config_json(ExperimentConfig base, const nlohmann::json& j);
ExperimentConfig load_config_file(const std::filesystem::path& path, ExperimentConfig base = {});

// Command implementations; each returns the files it wrote.
std::vector<std::filesystem::path> cmd_simulate(const ExperimentConfig& cfg);
std::vector<std::filesystem::path> cmd_ablate(const ExperimentConfig& cfg);
std::vector<std::filesystem::path> cmd_coverage(const ExperimentConfig& cfg);
std::vector<std::filesystem::path> cmd_coactivation(const ExperimentConfig& cfg);
std::vector<std::filesystem::path> cmd_reconstruct(const ExperimentConfig& cfg);
std::vector<std::filesystem::path> cmd_calibrate_static(const ExperimentConfig& cfg);
std::vector<std::filesystem::path> cmd_export_model(const ExperimentConfig& cfg);

// Frozen CSV column rows.
extern const char* const kCoverageCsvColumns;
extern const char* const kConcentrationCsvColumns;
extern const char* const kReconstructionCsvColumns;
extern const char* const kUnionGrowthCsvColumns;
extern const char* const kAblateCsvColumns;
extern const char* const kParetoCsvColumns;

/// Entry point for the `moespec` binary. Returns the process exit code:
/// 0 on success, 2 on invalid usage or configuration, 1 on run failures.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace moespec
