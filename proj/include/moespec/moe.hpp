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

#include <cstddef>
#include <span>
#include <vector>

#include "moespec/numerics.hpp"

namespace moespec {

// Linear router. Logits are w * h + bias; bias is zero unless the model was
// built with routing skew.
struct RouterWeights {
  Mat w;     // N x d
  Vec bias;  // N

  std::size_t num_experts() const { return w.rows; }
  bool operator==(const RouterWeights&) const = default;
};

// Two-layer SiLU MLP: w_out * silu(w_in * h).
struct Expert {
  Mat w_in;   // d_ff x d
  Mat w_out;  // d x d_ff

  Vec forward(std::span<const double> h) const;
  bool operator==(const Expert&) const = default;
};

struct MoELayerWeights {
  RouterWeights router;
  std::vector<Expert> experts;
  std::size_t top_k = 1;
  bool renormalize = true;

  std::size_t num_experts() const { return experts.size(); }
  std::size_t dim() const { return router.w.cols; }
  void validate() const;
  bool operator==(const MoELayerWeights&) const = default;
};

// Router output for one token: the full probability vector and its top-k.
struct RoutingRecord {
  Vec probs;
  std::vector<ExpertId> selected;  // descending probability, lower index on ties

  bool operator==(const RoutingRecord&) const = default;
};

struct WeightedExpert {
  ExpertId expert;
  double weight;
};

RoutingRecord route(const MoELayerWeights& layer, std::span<const double> h);

/// Mixing weights keyed by `over`, in the order given. With `renormalize`,
/// each weight is g_i divided by the sum of g over `over`.
std::vector<WeightedExpert> mixing_weights(const RoutingRecord& record,
                                           std::span<const ExpertId> over, bool renormalize);

/// Sum of weight * E_i(h) accumulated in the order of `terms`.
Vec weighted_expert_sum(const MoELayerWeights& layer, std::span<const double> h,
                        std::span<const WeightedExpert> terms);

// Unbudgeted MoE output over the natural top-k.
Vec moe_forward_full(const MoELayerWeights& layer, std::span<const double> h);
Vec moe_forward_full(const MoELayerWeights& layer, std::span<const double> h,
                     const RoutingRecord& record);

}  // namespace moespec
