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

#include "moespec/coverage.hpp"

#include <algorithm>

#include "moespec/kernels.hpp"

namespace moespec {

std::string to_string(CoveragePolicy p) {
  return p == CoveragePolicy::Truncation ? "truncation" : "substitution";
}

CoveragePolicy parse_coverage_policy(const std::string& s) {
  if (s == "truncation") return CoveragePolicy::Truncation;
  if (s == "substitution") return CoveragePolicy::Substitution;
  throw UsageError("unknown coverage policy '" + s + "' (expected truncation|substitution)");
}

std::vector<WeightedExpert> budgeted_terms(const MoELayerWeights& layer,
                                           const RoutingRecord& record,
                                           const std::vector<char>& in_shortlist,
                                           CoveragePolicy policy, TokenCoverageStats* stats) {
  TokenCoverageStats st;
  for (ExpertId e : record.selected) {
    if (!in_shortlist[e]) ++st.missing_count;
  }
  st.fully_skipped = st.missing_count == record.selected.size();

  std::vector<WeightedExpert> terms;
  if (policy == CoveragePolicy::Truncation) {
    auto weights = mixing_weights(record, record.selected, layer.renormalize);
    for (const WeightedExpert& w : weights) {
      if (in_shortlist[w.expert]) terms.push_back(w);
    }
  } else {
    Vec restricted(record.probs.size(), -1.0);
    std::size_t members = 0;
    for (std::size_t i = 0; i < restricted.size(); ++i) {
      if (in_shortlist[i]) {
        restricted[i] = record.probs[i];
        ++members;
      }
    }
    if (members == 0) throw UsageError("substitution with an empty shortlist");
    auto chosen = top_k_indices(restricted, std::min(layer.top_k, members));
    terms = mixing_weights(record, chosen, layer.renormalize);
  }
  st.experts_applied = terms.size();
  if (stats) *stats = st;
  return terms;
}

std::pair<Vec, TokenCoverageStats> moe_forward_budgeted(const MoELayerWeights& layer,
                                                        std::span<const double> h,
                                                        const RoutingRecord& record,
                                                        const Shortlist& shortlist,
                                                        CoveragePolicy policy) {
  if (shortlist.experts.empty()) throw UsageError("moe_forward_budgeted: empty shortlist");
  TokenCoverageStats st;
  auto terms = budgeted_terms(layer, record, shortlist.membership(layer.num_experts()), policy, &st);
  return {weighted_expert_sum(layer, h, terms), st};
}

void BudgetedMoeExecutor::run(std::size_t layer, const MoELayerWeights& weights,
                              std::span<const Vec> inputs, std::span<const RoutingRecord> routing,
                              std::span<Vec> outputs) {
  Shortlist s = selector_.select(layer, weights, inputs, routing);
  if (s.experts.empty()) throw UsageError("selector returned an empty shortlist");
  const auto member = s.membership(weights.num_experts());

  const std::size_t m = inputs.size();
  std::vector<TokenCoverageStats> st(m);
  std::vector<std::vector<WeightedExpert>> terms(m);
  for (std::size_t t = 0; t < m; ++t) {
    terms[t] = budgeted_terms(weights, routing[t], member, policy_, &st[t]);
  }
  if (const auto* cached = selector_.expert_outputs()) {
    // Same accumulation order as weighted_expert_sum.
    for (std::size_t t = 0; t < m; ++t) {
      Vec o(weights.dim(), 0.0);
      for (const WeightedExpert& w : terms[t]) axpy(w.weight, (*cached)[w.expert][t], o);
      outputs[t] = std::move(o);
    }
  } else {
    auto out = kernels::weighted_sum_batch(weights, inputs, terms);
    std::move(out.begin(), out.end(), outputs.begin());
  }

  std::vector<char> ran(weights.num_experts(), 0);
  for (const auto& ts : terms)
    for (const WeightedExpert& w : ts) ran[w.expert] = 1;
  std::vector<ExpertId> executed;
  for (std::size_t i = 0; i < ran.size(); ++i) {
    if (ran[i]) executed.push_back(i);
  }

  if (shortlists_.size() <= layer) {
    shortlists_.resize(layer + 1);
    executed_.resize(layer + 1);
    stats_.resize(layer + 1);
  }
  shortlists_[layer] = std::move(s);
  executed_[layer] = std::move(executed);
  stats_[layer] = std::move(st);
}

BudgetedForward model_forward_budgeted(const MoEModel& model, const ContextCache& context,
                                       const DraftTree& tree, ShortlistSelector& selector,
                                       CoveragePolicy policy) {
  BudgetedMoeExecutor exec(selector, policy);
  BudgetedForward out;
  out.result = forward_tree(model, context, tree.tokens(), tree.parents(), exec);
  out.shortlists = exec.shortlists();
  out.executed = exec.executed();
  out.stats = exec.stats();
  return out;
}

BudgetedForward model_forward_budgeted(const MoEModel& model, const ContextCache& context,
                                       const DraftTree& tree,
                                       const std::vector<Shortlist>& shortlists,
                                       CoveragePolicy policy) {
  if (shortlists.size() < model.num_layers()) {
    throw UsageError("model_forward_budgeted: need a shortlist for every MoE layer");
  }
  FixedSelector fixed(shortlists);
  return model_forward_budgeted(model, context, tree, fixed, policy);
}

}  // namespace moespec
