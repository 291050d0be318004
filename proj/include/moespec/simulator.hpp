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
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moespec/budgeting.hpp"
#include "moespec/coverage.hpp"
#include "moespec/model.hpp"
#include "moespec/tree.hpp"

namespace moespec {

// Bandwidth cost model, in abstract bytes.
//   AR token    = bytes_shared + sum_l k * bytes_expert
//   spec step   = (bytes_shared + sum_l unique_l * bytes_expert) * (1 + overhead if budgeted)
//                 + draft_step_cost * tree levels
struct CostModelParams {
  double bytes_expert = 1.0;
  double bytes_shared = 32.0;
  double draft_step_cost = 2.0;
  double selection_overhead_frac = 0.025;

  void validate() const;
  double ar_token_cost(const ModelConfig& c) const;
  bool operator==(const CostModelParams&) const = default;
};

struct BudgetSpec {
  RankingMethod method = RankingMethod::Router;
  CoveragePolicy policy = CoveragePolicy::Substitution;
  std::size_t budget = 32;
  bool uses_raw_g = true;  // oracle objective weighting
};

enum class GenerationMode { AR, SpecFull, SpecBudgeted };
std::string to_string(GenerationMode m);

struct RunMode {
  GenerationMode kind = GenerationMode::AR;
  TreeTopology topology;
  std::optional<BudgetSpec> budget;  // required for SpecBudgeted

  static RunMode ar() { return {}; }
  static RunMode spec_full(TreeTopology t) { return {GenerationMode::SpecFull, std::move(t), {}}; }
  static RunMode spec_budgeted(TreeTopology t, BudgetSpec b) {
    return {GenerationMode::SpecBudgeted, std::move(t), b};
  }
};

struct StepReport {
  std::size_t step = 0;
  std::size_t tau = 1;      // accepted path length + bonus token
  std::size_t emitted = 1;  // tau clipped to the remaining generation length
  std::vector<std::size_t> unique_experts;  // per layer, experts actually loaded
  std::size_t tree_size = 0;
  std::size_t tree_levels = 0;
  bool budgeted = false;
  double verify_cost = 0.0;
  double draft_cost = 0.0;
  double step_cost = 0.0;
  // missing_experts[layer][node] under budgeting; empty otherwise.
  std::vector<std::vector<std::size_t>> missing_experts;
};

struct RunSummary {
  std::size_t tokens = 0;
  std::size_t steps = 0;
  double mean_tau = 0.0;
  std::vector<double> mean_unique_per_layer;
  double mean_unique = 0.0;
  std::size_t max_unique = 0;
  double speedup = 1.0;
  double wall_ms = 0.0;  // informational; never written to deterministic outputs
};

struct RunResult {
  std::vector<TokenId> tokens;
  std::vector<StepReport> steps;
  RunSummary summary;
};

struct VerifyOutcome {
  std::vector<std::size_t> path;  // accepted node indices, root first
  TokenId bonus = 0;
  std::size_t tau = 1;
  std::vector<std::size_t> unique_experts;
  std::vector<std::vector<TokenCoverageStats>> coverage;  // budgeted only
  std::vector<Shortlist> shortlists;                      // budgeted only
  ForwardResult forward;
};

/// Greedy tree verification. A node is accepted when its parent is accepted
/// (the context end, for the root) and its token equals the target argmax at
/// the parent. `selector == nullptr` runs the unbudgeted target.
VerifyOutcome verify_greedy(const MoEModel& target, const ContextCache& target_context,
                            const DraftTree& tree, ShortlistSelector* selector,
                            CoveragePolicy policy = CoveragePolicy::Substitution);

// Accepted path, bonus token and tau from per-node logits.
VerifyOutcome accept_greedy(const DraftTree& tree, const Vec& context_logits,
                            std::span<const Vec> node_logits);

RunResult run_generation(const MoEModel& target, const MoEModel& draft,
                         std::span<const TokenId> prompt, std::size_t gen_len, const RunMode& mode,
                         const CostModelParams& cost, const CalibrationCounts* counts = nullptr);

/// Speedup recomputed from step reports alone.
double modeled_speedup(std::span<const StepReport> steps, const CostModelParams& cost,
                       const ModelConfig& config);

RunSummary summarize(std::span<const StepReport> steps, const CostModelParams& cost,
                     const ModelConfig& config);

struct SweepCell {
  GenerationMode mode = GenerationMode::AR;
  std::size_t tree_size = 0;  // 0 for AR
  std::optional<BudgetSpec> budget;

  std::string label() const;
};

struct SweepSpec {
  std::vector<std::size_t> tree_sizes;
  std::vector<std::size_t> budgets;
  std::vector<RankingMethod> methods;
  std::vector<CoveragePolicy> policies;
  std::vector<std::uint64_t> seeds;
  bool include_full = true;  // unbudgeted spec cell per tree size
  std::size_t prompts_per_seed = 1;
  std::size_t gen_len = 64;
  std::size_t prompt_length = 16;
  bool uses_raw_g = true;
  std::uint64_t master_seed = 0;
  CostModelParams cost;
  bool keep_steps = false;

  // AR first, then per tree size: full, then budgets x methods x policies.
  std::vector<SweepCell> cells() const;
};

struct SweepRow {
  std::size_t cell = 0;
  SweepCell spec;
  std::uint64_t seed = 0;
  std::size_t prompts = 0;
  std::size_t tokens = 0;
  std::size_t steps = 0;
  double mean_tau = 0.0;
  double mean_unique = 0.0;
  std::size_t max_unique = 0;
  double speedup = 0.0;
  double quality = 1.0;  // position-wise exact match with the AR stream
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<SweepRow> rows;  // sorted by (cell, seed)
  // steps[row][prompt] when keep_steps is set
  std::vector<std::vector<std::vector<StepReport>>> steps;
};

PromptGenerator prompts_for_seed(std::uint64_t master_seed, std::uint64_t seed,
                                 std::size_t prompt_length, std::size_t vocab);

SweepResult sweep(const MoEModel& target, const MoEModel& draft, const SweepSpec& spec,
                  const CalibrationCounts* counts, int workers = 1);

double exact_match_rate(std::span<const TokenId> a, std::span<const TokenId> reference);

struct CellAggregate {
  std::size_t cell = 0;
  SweepCell spec;
  std::size_t seeds = 0;
  double speedup_mean = 0.0, speedup_std = 0.0;
  double tau_mean = 0.0, tau_std = 0.0;
  double unique_mean = 0.0, unique_std = 0.0;
  double quality_mean = 0.0, quality_std = 0.0;
  std::size_t max_unique = 0;
};

std::vector<CellAggregate> aggregate(const SweepResult& result);

// Frozen CSV schema for sweep rows.
extern const char* const kSweepCsvColumns;
void write_sweep_rows_csv(const SweepResult& result, std::ostream& os);
nlohmann::ordered_json step_report_to_json(const StepReport& s);

}  // namespace moespec
