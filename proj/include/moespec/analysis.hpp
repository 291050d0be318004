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

#include "moespec/budgeting.hpp"
#include "moespec/coverage.hpp"
#include "moespec/simulator.hpp"
#include "moespec/tree.hpp"

namespace moespec {

// How the budgeted output O_S is formed when measuring reconstruction error.
//   Truncation / Substitution: the coverage policy output, compared against
//     the unbudgeted MoE output.
//   Raw: the greedy oracle objective, sum over j in S of w_j E_j (w_j from
//     oracle_weight) against the unbudgeted MoE output.
enum class ReconstructionMode { Truncation, Substitution, Raw };

std::string to_string(ReconstructionMode m);
ReconstructionMode parse_reconstruction_mode(const std::string& s);

struct ReconstructionTerms {
  double residual = 0.0;  // sum_t |O_S,t - O*_t|^2
  double gold = 0.0;      // sum_t |O*_t|^2

  double error() const;
};

ReconstructionTerms reconstruction_terms(const MoELayerWeights& layer,
                                         std::span<const Vec> inputs,
                                         std::span<const RoutingRecord> routing,
                                         const Shortlist& shortlist, ReconstructionMode mode,
                                         bool uses_raw_g,
                                         const std::vector<std::vector<Vec>>* expert_outputs = nullptr);

/// sum_t |O_S,t - O*_t|^2 / sum_t |O*_t|^2. Throws DegenerateInputError when
/// the gold output is identically zero.
double reconstruction_error(const MoELayerWeights& layer, std::span<const Vec> inputs,
                            std::span<const RoutingRecord> routing, const Shortlist& shortlist,
                            ReconstructionMode mode, bool uses_raw_g);

/// Teacher-forced per-layer errors on one tree: every layer sees the full
/// model's hidden states, and the shortlist is chosen by `method` from them.
std::vector<double> teacher_forced_errors(const MoEModel& target, const ContextCache& context,
                                          const DraftTree& tree, RankingMethod method,
                                          std::size_t budget, ReconstructionMode mode,
                                          bool uses_raw_g, const CalibrationCounts* counts);

// curve[B-1] = aggregate routing mass of the top-B experts / total mass.
Vec coverage_curve(std::span<const RoutingRecord> routing);
Vec coverage_curve(const TreeRouting& routing, std::size_t layer);

struct Rational {
  std::uint64_t num = 0;
  std::uint64_t den = 1;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Rational&) const = default;
};

// k(k-1) / (N(N-1)) in lowest terms.
Rational expected_pair_probability(std::uint64_t num_experts, std::uint64_t top_k);

struct CoactivationMatrix {
  std::size_t layer = 0;
  std::size_t num_experts = 0;
  std::size_t top_k = 0;
  std::vector<std::uint64_t> counts;  // N x N, symmetric; diagonal = selection counts
  std::uint64_t tokens_observed = 0;

  CoactivationMatrix() = default;
  CoactivationMatrix(std::size_t layer, std::size_t num_experts, std::size_t top_k);

  std::uint64_t operator()(std::size_t i, std::size_t j) const { return counts[i * num_experts + j]; }
  void add(const RoutingRecord& rec);
  void merge(const CoactivationMatrix& other);

  std::uint64_t max_pair() const;  // largest off-diagonal entry
  /// max pair count / (tokens_observed * k(k-1)/(N(N-1))).
  double concentration() const;
};

CoactivationMatrix coactivation(std::span<const RoutingRecord> routing, std::size_t layer,
                                std::size_t top_k);

struct ParetoRow {
  std::string label;
  GenerationMode mode = GenerationMode::AR;
  std::size_t tree_size = 0;
  std::optional<BudgetSpec> budget;
  double quality_pct = 100.0;  // relative to AR
  double speedup = 1.0;        // relative to AR
};

/// Quality (AR exact-match rate) and speedup of every cell, normalized to the
/// AR cell and sorted by speedup (then label).
std::vector<ParetoRow> pareto_table(std::span<const CellAggregate> cells);

// ---------------------------------------------------------------------------
// Records and traces
// ---------------------------------------------------------------------------

struct TraceRecord {
  std::size_t layer = 0;
  std::uint64_t group = 0;  // tree or sequence id; 0 when the trace has none
  RoutingRecord record;
};

/// One JSON object per line. Accepted forms:
///   {"layer": l, "probs": [N floats]}                     dense; top-k taken with k
///   {"layer": l, "topk": [[index, prob], ...]}            sparse; unlisted experts get 0
///   {"layer": l, "probs": [...], "selected": [...]}       native routing record
/// Optional fields: "tree" (group id), "k", "n_experts" (sparse width).
/// `default_k` / `default_n` apply when a line omits them.
std::vector<TraceRecord> read_trace(std::istream& is, std::size_t default_k, std::size_t default_n);

void write_routing_jsonl(std::ostream& os, std::size_t layer, std::uint64_t group,
                         std::span<const RoutingRecord> records);

// Records for one layer, in file order.
std::vector<RoutingRecord> records_for_layer(std::span<const TraceRecord> trace, std::size_t layer);
std::size_t trace_layers(std::span<const TraceRecord> trace);

std::vector<StepReport> read_step_reports(std::istream& is);

}  // namespace moespec
