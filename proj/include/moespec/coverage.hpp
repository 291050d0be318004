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

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moespec/budgeting.hpp"
#include "moespec/model.hpp"
#include "moespec/tree.hpp"

namespace moespec {

enum class CoveragePolicy { Truncation, Substitution };

std::string to_string(CoveragePolicy p);
CoveragePolicy parse_coverage_policy(const std::string& s);

struct TokenCoverageStats {
  std::size_t missing_count = 0;  // |T_k(h) \ S|
  bool fully_skipped = false;     // T_k(h) and S are disjoint
  std::size_t experts_applied = 0;

  bool operator==(const TokenCoverageStats&) const = default;
};

/// Experts and weights a token uses under `policy` with shortlist membership
/// `in_shortlist`.
///
/// Truncation keeps T_k(h) ∩ S with weights computed over the full natural
/// top-k. Substitution takes the top-k of g restricted to S (all of S when
/// |S| < k), renormalized over that set when the layer renormalizes.
std::vector<WeightedExpert> budgeted_terms(const MoELayerWeights& layer,
                                           const RoutingRecord& record,
                                           const std::vector<char>& in_shortlist,
                                           CoveragePolicy policy, TokenCoverageStats* stats);

std::pair<Vec, TokenCoverageStats> moe_forward_budgeted(const MoELayerWeights& layer,
                                                        std::span<const double> h,
                                                        const RoutingRecord& record,
                                                        const Shortlist& shortlist,
                                                        CoveragePolicy policy);

/// MoE executor enforcing a per-layer shortlist chosen by `selector`.
/// Records every shortlist, the experts actually executed and per-token
/// coverage stats.
class BudgetedMoeExecutor final : public MoeExecutor {
 public:
  BudgetedMoeExecutor(ShortlistSelector& selector, CoveragePolicy policy)
      : selector_(selector), policy_(policy) {}

  void run(std::size_t layer, const MoELayerWeights& weights, std::span<const Vec> inputs,
           std::span<const RoutingRecord> routing, std::span<Vec> outputs) override;

  const std::vector<Shortlist>& shortlists() const { return shortlists_; }
  // executed[layer]: ascending experts that ran for at least one token.
  const std::vector<std::vector<ExpertId>>& executed() const { return executed_; }
  // stats[layer][token]
  const std::vector<std::vector<TokenCoverageStats>>& stats() const { return stats_; }

 private:
  ShortlistSelector& selector_;
  CoveragePolicy policy_;
  std::vector<Shortlist> shortlists_;
  std::vector<std::vector<ExpertId>> executed_;
  std::vector<std::vector<TokenCoverageStats>> stats_;
};

struct BudgetedForward {
  ForwardResult result;
  std::vector<Shortlist> shortlists;
  std::vector<std::vector<ExpertId>> executed;
  std::vector<std::vector<TokenCoverageStats>> stats;
};

/// Target pass over the tree with every MoE sublayer budgeted. Routing is
/// taken from the budgeted stream itself, so errors compound across layers.
BudgetedForward model_forward_budgeted(const MoEModel& model, const ContextCache& context,
                                       const DraftTree& tree, ShortlistSelector& selector,
                                       CoveragePolicy policy);

// Same with precomputed per-layer shortlists.
BudgetedForward model_forward_budgeted(const MoEModel& model, const ContextCache& context,
                                       const DraftTree& tree,
                                       const std::vector<Shortlist>& shortlists,
                                       CoveragePolicy policy);

}  // namespace moespec
