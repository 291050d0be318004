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
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moespec/model.hpp"
#include "moespec/tree.hpp"

namespace moespec {

enum class RankingMethod { Static, Router, Oracle };

std::string to_string(RankingMethod m);
RankingMethod parse_ranking_method(const std::string& s);

// Budgeted expert subset for one layer.
//
// For static and router ranking, `experts` is ordered by descending score
// then ascending index. For oracle ranking it is the greedy selection order
// and scores[i] is the negated residual when expert i was added (unselected
// experts hold -infinity).
struct Shortlist {
  std::size_t layer = 0;
  std::vector<ExpertId> experts;
  RankingMethod method = RankingMethod::Router;
  Vec scores;  // one per expert in the layer

  bool contains(ExpertId e) const;
  std::vector<char> membership(std::size_t num_experts) const;
};

// Per-layer top-k selection counts over a calibration stream.
struct CalibrationCounts {
  std::vector<std::vector<std::uint64_t>> counts;  // [layer][expert]
  std::uint64_t tokens = 0;
  std::size_t top_k = 0;

  void add(std::size_t layer, const RoutingRecord& rec);
  void merge(const CalibrationCounts& other);
  bool operator==(const CalibrationCounts&) const = default;
};

/// Disjoint-seed calibration stream of `total_tokens` tokens, cut into
/// prompt-length sequences.
std::vector<std::vector<TokenId>> calibration_stream(const PromptGenerator& prompts,
                                                     std::size_t total_tokens);

/// c_i = number of calibration tokens whose top-k contains expert i, per layer.
/// Each sequence is run causally from an empty context.
CalibrationCounts calibrate_static(const MoEModel& model,
                                   std::span<const std::vector<TokenId>> sequences,
                                   int workers = 1);

Shortlist rank_static(const CalibrationCounts& counts, std::size_t layer, std::size_t budget);

/// s_i = sum over tree tokens of g_i; shortlist = top-B by s_i.
Shortlist rank_router(const TreeRouting& routing, std::size_t layer, std::size_t budget);
Shortlist rank_router(std::span<const RoutingRecord> routing, std::size_t layer,
                      std::size_t budget);

// Weight of expert j for a token in the oracle objective: raw g_j, or the
// layer's mixing convention extended to every expert (g_j / sum over the
// natural top-k when the layer renormalizes).
double oracle_weight(const RoutingRecord& rec, ExpertId j, bool uses_raw_g, bool renormalize);

// O*_t: the unbudgeted layer output, mixed with the layer's own weights.
Vec oracle_gold(const RoutingRecord& rec, std::span<const Vec> expert_outputs_for_token,
                bool renormalize);

struct OracleTrace {
  std::vector<double> residuals;  // objective after each greedy step
};

/// Greedy reconstruction-error minimization. `expert_outputs[i][t]` may be
/// supplied to skip re-evaluating E_i(h_t).
Shortlist rank_oracle(const MoELayerWeights& layer, std::size_t layer_index,
                      std::span<const Vec> inputs, std::span<const RoutingRecord> routing,
                      std::size_t budget, bool uses_raw_g,
                      const std::vector<std::vector<Vec>>* expert_outputs = nullptr,
                      OracleTrace* trace = nullptr);

// Picks a shortlist for one layer of a verification pass.
class ShortlistSelector {
 public:
  virtual ~ShortlistSelector() = default;
  virtual Shortlist select(std::size_t layer, const MoELayerWeights& weights,
                           std::span<const Vec> inputs, std::span<const RoutingRecord> routing) = 0;
  // Expert outputs [expert][token] computed by the last select(), if any.
  virtual const std::vector<std::vector<Vec>>* expert_outputs() const { return nullptr; }
};

class RouterSelector final : public ShortlistSelector {
 public:
  explicit RouterSelector(std::size_t budget) : budget_(budget) {}
  Shortlist select(std::size_t layer, const MoELayerWeights&, std::span<const Vec>,
                   std::span<const RoutingRecord> routing) override;

 private:
  std::size_t budget_;
};

class StaticSelector final : public ShortlistSelector {
 public:
  StaticSelector(const CalibrationCounts& counts, std::size_t budget);
  Shortlist select(std::size_t layer, const MoELayerWeights&, std::span<const Vec>,
                   std::span<const RoutingRecord>) override;

 private:
  std::vector<Shortlist> per_layer_;
};

class OracleSelector final : public ShortlistSelector {
 public:
  OracleSelector(std::size_t budget, bool uses_raw_g) : budget_(budget), uses_raw_g_(uses_raw_g) {}
  Shortlist select(std::size_t layer, const MoELayerWeights& weights, std::span<const Vec> inputs,
                   std::span<const RoutingRecord> routing) override;
  const std::vector<std::vector<Vec>>* expert_outputs() const override { return &outputs_; }

 private:
  std::size_t budget_;
  bool uses_raw_g_;
  std::vector<std::vector<Vec>> outputs_;
};

class FixedSelector final : public ShortlistSelector {
 public:
  explicit FixedSelector(std::vector<Shortlist> per_layer) : per_layer_(std::move(per_layer)) {}
  Shortlist select(std::size_t layer, const MoELayerWeights&, std::span<const Vec>,
                   std::span<const RoutingRecord>) override;

 private:
  std::vector<Shortlist> per_layer_;
};

std::unique_ptr<ShortlistSelector> make_selector(RankingMethod method, std::size_t budget,
                                                 const CalibrationCounts* counts, bool uses_raw_g);

nlohmann::ordered_json shortlist_to_json(const Shortlist& s);
Shortlist shortlist_from_json(const nlohmann::json& j);

nlohmann::ordered_json counts_to_json(const CalibrationCounts& c);
CalibrationCounts counts_from_json(const nlohmann::json& j);

}  // namespace moespec
