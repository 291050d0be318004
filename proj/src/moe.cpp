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

#include "moespec/moe.hpp"

#include <string>

namespace moespec {

Vec Expert::forward(std::span<const double> h) const {
  Vec hidden = matvec(w_in, h);
  for (double& v : hidden) v = silu(v);
  return matvec(w_out, hidden);
}

void MoELayerWeights::validate() const {
  const std::size_t n = num_experts();
  if (router.w.rows != n || router.bias.size() != n) {
    throw UsageError("MoELayerWeights: router has " + std::to_string(router.w.rows) +
                     " rows but layer has " + std::to_string(n) + " experts");
  }
  if (top_k < 1 || top_k > n) {
    throw UsageError("MoELayerWeights: top_k must lie in [1, N]");
  }
  for (const Expert& e : experts) {
    if (e.w_in.cols != dim() || e.w_out.rows != dim() || e.w_out.cols != e.w_in.rows) {
      throw UsageError("MoELayerWeights: expert shapes inconsistent with d");
    }
  }
}

RoutingRecord route(const MoELayerWeights& layer, std::span<const double> h) {
  if (h.size() != layer.dim()) {
    throw UsageError("route: hidden size " + std::to_string(h.size()) + " != d=" +
                     std::to_string(layer.dim()));
  }
  Vec logits = matvec(layer.router.w, h);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += layer.router.bias[i];
  RoutingRecord rec;
  rec.probs = softmax(logits);
  rec.selected = top_k_indices(rec.probs, layer.top_k);
  return rec;
}

std::vector<WeightedExpert> mixing_weights(const RoutingRecord& record,
                                           std::span<const ExpertId> over, bool renormalize) {
  if (over.empty()) throw UsageError("mixing_weights: empty expert set");
  std::vector<WeightedExpert> out;
  out.reserve(over.size());
  double total = 0.0;
  for (ExpertId i : over) {
    if (i >= record.probs.size()) throw UsageError("mixing_weights: expert index out of range");
    total += record.probs[i];
  }
  if (renormalize && total == 0.0) {
    throw DegenerateInputError("mixing_weights: routing mass over set is zero");
  }
  for (ExpertId i : over) {
    out.push_back({i, renormalize ? record.probs[i] / total : record.probs[i]});
  }
  return out;
}

Vec weighted_expert_sum(const MoELayerWeights& layer, std::span<const double> h,
                        std::span<const WeightedExpert> terms) {
  Vec out(layer.dim(), 0.0);
  for (const WeightedExpert& t : terms) {
    Vec e = layer.experts[t.expert].forward(h);
    axpy(t.weight, e, out);
  }
  return out;
}

Vec moe_forward_full(const MoELayerWeights& layer, std::span<const double> h) {
  return moe_forward_full(layer, h, route(layer, h));
}

Vec moe_forward_full(const MoELayerWeights& layer, std::span<const double> h,
                     const RoutingRecord& record) {
  auto terms = mixing_weights(record, record.selected, layer.renormalize);
  return weighted_expert_sum(layer, h, terms);
}

}  // namespace moespec
