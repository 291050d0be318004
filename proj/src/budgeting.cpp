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

#include "moespec/budgeting.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>

#include "moespec/kernels.hpp"
#include "moespec/parallel.hpp"

namespace moespec {

std::string to_string(RankingMethod m) {
  switch (m) {
    case RankingMethod::Static: return "static";
    case RankingMethod::Router: return "router";
    case RankingMethod::Oracle: return "oracle";
  }
  return "unknown";
}

RankingMethod parse_ranking_method(const std::string& s) {
  if (s == "static") return RankingMethod::Static;
  if (s == "router") return RankingMethod::Router;
  if (s == "oracle") return RankingMethod::Oracle;
  throw UsageError("unknown ranking method '" + s + "' (expected static|router|oracle)");
}

bool Shortlist::contains(ExpertId e) const {
  return std::find(experts.begin(), experts.end(), e) != experts.end();
}

std::vector<char> Shortlist::membership(std::size_t num_experts) const {
  std::vector<char> m(num_experts, 0);
  for (ExpertId e : experts) {
    if (e >= num_experts) throw UsageError("Shortlist: expert index out of range");
    m[e] = 1;
  }
  return m;
}

void CalibrationCounts::add(std::size_t layer, const RoutingRecord& rec) {
  if (layer >= counts.size()) counts.resize(layer + 1);
  auto& c = counts[layer];
  if (c.size() < rec.probs.size()) c.resize(rec.probs.size(), 0);
  for (ExpertId e : rec.selected) ++c[e];
}

void CalibrationCounts::merge(const CalibrationCounts& other) {
  if (counts.size() < other.counts.size()) counts.resize(other.counts.size());
  for (std::size_t l = 0; l < other.counts.size(); ++l) {
    if (counts[l].size() < other.counts[l].size()) counts[l].resize(other.counts[l].size(), 0);
    for (std::size_t i = 0; i < other.counts[l].size(); ++i) counts[l][i] += other.counts[l][i];
  }
  tokens += other.tokens;
  if (top_k == 0) top_k = other.top_k;
}

std::vector<std::vector<TokenId>> calibration_stream(const PromptGenerator& prompts,
                                                     std::size_t total_tokens) {
  std::vector<std::vector<TokenId>> seqs;
  std::size_t remaining = total_tokens;
  for (std::uint64_t i = 0; remaining > 0; ++i) {
    auto p = prompts.prompt(i);
    if (p.size() > remaining) p.resize(remaining);
    remaining -= p.size();
    seqs.push_back(std::move(p));
  }
  return seqs;
}

CalibrationCounts calibrate_static(const MoEModel& model,
                                   std::span<const std::vector<TokenId>> sequences, int workers) {
  std::size_t total = 0;
  for (const auto& s : sequences) total += s.size();
  if (total == 0) throw UsageError("calibrate_static: empty calibration stream");

  std::vector<CalibrationCounts> partial(sequences.size());
  parallel_for(sequences.size(), workers, [&](std::size_t i) {
    if (sequences[i].empty()) return;
    ContextCache cache;
    ForwardResult fr = extend_context(model, cache, sequences[i]);
    CalibrationCounts& c = partial[i];
    c.counts.assign(model.num_layers(), std::vector<std::uint64_t>(model.config.num_experts, 0));
    c.top_k = model.config.top_k;
    c.tokens = sequences[i].size();
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
      for (const RoutingRecord& rec : fr.layers[l].routing) c.add(l, rec);
    }
  });
  CalibrationCounts out;
  out.counts.assign(model.num_layers(), std::vector<std::uint64_t>(model.config.num_experts, 0));
  out.top_k = model.config.top_k;
  for (const auto& p : partial) out.merge(p);
  return out;
}

namespace {

Shortlist top_budget(std::size_t layer, RankingMethod method, Vec scores, std::size_t budget) {
  if (budget < 1) throw UsageError("expert budget must be >= 1");
  Shortlist s;
  s.layer = layer;
  s.method = method;
  s.experts = top_k_indices(scores, std::min(budget, scores.size()));
  s.scores = std::move(scores);
  return s;
}

}  // namespace

Shortlist rank_static(const CalibrationCounts& counts, std::size_t layer, std::size_t budget) {
  if (layer >= counts.counts.size()) throw UsageError("rank_static: layer out of range");
  const auto& c = counts.counts[layer];
  Vec scores(c.begin(), c.end());
  return top_budget(layer, RankingMethod::Static, std::move(scores), budget);
}

Shortlist rank_router(const TreeRouting& routing, std::size_t layer, std::size_t budget) {
  if (layer >= routing.num_layers()) throw UsageError("rank_router: layer out of range");
  return rank_router(routing.layers[layer], layer, budget);
}

Shortlist rank_router(std::span<const RoutingRecord> routing, std::size_t layer,
                      std::size_t budget) {
  if (routing.empty()) throw UsageError("rank_router: no routing records");
  Vec scores(routing.front().probs.size(), 0.0);
  for (const RoutingRecord& rec : routing) {
    if (rec.probs.size() != scores.size()) throw UsageError("rank_router: inconsistent N");
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] += rec.probs[i];
  }
  return top_budget(layer, RankingMethod::Router, std::move(scores), budget);
}

double oracle_weight(const RoutingRecord& rec, ExpertId j, bool uses_raw_g, bool renormalize) {
  if (uses_raw_g || !renormalize) return rec.probs[j];
  double total = 0.0;
  for (ExpertId i : rec.selected) total += rec.probs[i];
  if (total == 0.0) throw DegenerateInputError("oracle_weight: zero top-k mass");
  return rec.probs[j] / total;
}

Vec oracle_gold(const RoutingRecord& rec, std::span<const Vec> expert_outputs_for_token,
                bool renormalize) {
  Vec out(expert_outputs_for_token.front().size(), 0.0);
  for (const WeightedExpert& w : mixing_weights(rec, rec.selected, renormalize)) {
    axpy(w.weight, expert_outputs_for_token[w.expert], out);
  }
  return out;
}

Shortlist rank_oracle(const MoELayerWeights& layer, std::size_t layer_index,
                      std::span<const Vec> inputs, std::span<const RoutingRecord> routing,
                      std::size_t budget, bool uses_raw_g,
                      const std::vector<std::vector<Vec>>* expert_outputs, OracleTrace* trace) {
  if (budget < 1) throw UsageError("expert budget must be >= 1");
  if (inputs.size() != routing.size() || inputs.empty()) {
    throw UsageError("rank_oracle: need one routing record per input");
  }
  const std::size_t n = layer.num_experts();
  if (budget > n) {
    std::cerr << "warning: oracle budget " << budget << " exceeds N=" << n << "; clamping\n";
    budget = n;
  }
  const std::size_t m = inputs.size();
  const std::size_t d = layer.dim();

  std::vector<std::vector<Vec>> computed;
  if (expert_outputs == nullptr) {
    computed = kernels::expert_outputs_all(layer, inputs);
    expert_outputs = &computed;
  }
  const auto& eo = *expert_outputs;

  // contrib[i] = (w_{i,t} E_i(h_t))_t and residual = (O*_t - sum_{j in S} contrib[j][t])_t,
  // both flattened token-major.
  const std::size_t md = m * d;
  std::vector<Vec> contrib(n, Vec(md));
  Vec residual(md);
  std::vector<Vec> per_token(n);
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const double w = oracle_weight(routing[t], i, uses_raw_g, layer.renormalize);
      for (std::size_t c = 0; c < d; ++c) contrib[i][t * d + c] = w * eo[i][t][c];
      per_token[i] = eo[i][t];
    }
    Vec gold = oracle_gold(routing[t], per_token, layer.renormalize);
    std::copy(gold.begin(), gold.end(), residual.begin() + static_cast<std::ptrdiff_t>(t * d));
  }

  Shortlist s;
  s.layer = layer_index;
  s.method = RankingMethod::Oracle;
  s.scores.assign(n, -std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  for (std::size_t step = 0; step < budget; ++step) {
    std::size_t best = n;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (chosen[i]) continue;
      const double err = squared_distance(residual, contrib[i]);
      if (err < best_err || best == n) {
        best = i;
        best_err = err;
      }
    }
    chosen[best] = 1;
    s.experts.push_back(best);
    s.scores[best] = -best_err;
    for (std::size_t x = 0; x < md; ++x) residual[x] -= contrib[best][x];
    if (trace) trace->residuals.push_back(best_err);
  }
  return s;
}

Shortlist RouterSelector::select(std::size_t layer, const MoELayerWeights&, std::span<const Vec>,
                                 std::span<const RoutingRecord> routing) {
  return rank_router(routing, layer, budget_);
}

StaticSelector::StaticSelector(const CalibrationCounts& counts, std::size_t budget) {
  for (std::size_t l = 0; l < counts.counts.size(); ++l) {
    per_layer_.push_back(rank_static(counts, l, budget));
  }
}

Shortlist StaticSelector::select(std::size_t layer, const MoELayerWeights&, std::span<const Vec>,
                                 std::span<const RoutingRecord>) {
  if (layer >= per_layer_.size()) throw UsageError("StaticSelector: no ranking for layer");
  return per_layer_[layer];
}

Shortlist OracleSelector::select(std::size_t layer, const MoELayerWeights& weights,
                                 std::span<const Vec> inputs,
                                 std::span<const RoutingRecord> routing) {
  outputs_ = kernels::expert_outputs_all(weights, inputs);
  return rank_oracle(weights, layer, inputs, routing, std::min(budget_, weights.num_experts()),
                     uses_raw_g_, &outputs_);
}

Shortlist FixedSelector::select(std::size_t layer, const MoELayerWeights&, std::span<const Vec>,
                                std::span<const RoutingRecord>) {
  if (layer >= per_layer_.size()) throw UsageError("FixedSelector: no shortlist for layer");
  return per_layer_[layer];
}

std::unique_ptr<ShortlistSelector> make_selector(RankingMethod method, std::size_t budget,
                                                 const CalibrationCounts* counts, bool uses_raw_g) {
  switch (method) {
    case RankingMethod::Router: return std::make_unique<RouterSelector>(budget);
    case RankingMethod::Oracle: return std::make_unique<OracleSelector>(budget, uses_raw_g);
    case RankingMethod::Static:
      if (counts == nullptr) throw UsageError("static ranking requires calibration counts");
      return std::make_unique<StaticSelector>(*counts, budget);
  }
  throw UsageError("make_selector: unknown method");
}

nlohmann::ordered_json shortlist_to_json(const Shortlist& s) {
  nlohmann::ordered_json scores = nlohmann::ordered_json::array();
  for (double v : s.scores) {
    if (std::isfinite(v)) scores.push_back(v);
    else scores.push_back(nullptr);
  }
  return {{"layer", s.layer}, {"method", to_string(s.method)}, {"experts", s.experts},
          {"scores", scores}};
}

Shortlist shortlist_from_json(const nlohmann::json& j) {
  Shortlist s;
  s.layer = j.at("layer");
  s.method = parse_ranking_method(j.at("method"));
  s.experts = j.at("experts").get<std::vector<ExpertId>>();
  for (const auto& v : j.at("scores")) {
    s.scores.push_back(v.is_null() ? -std::numeric_limits<double>::infinity() : v.get<double>());
  }
  return s;
}

nlohmann::ordered_json counts_to_json(const CalibrationCounts& c) {
  return {{"format", "moespec-static-ranking"},
          {"top_k", c.top_k},
          {"tokens", c.tokens},
          {"counts", c.counts}};
}

CalibrationCounts counts_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "moespec-static-ranking") {
    throw UsageError("not a moespec static ranking file");
  }
  CalibrationCounts c;
  c.top_k = j.at("top_k");
  c.tokens = j.at("tokens");
  c.counts = j.at("counts").get<std::vector<std::vector<std::uint64_t>>>();
  for (const auto& layer : c.counts) {
    std::uint64_t total = 0;
    for (auto v : layer) total += v;
    if (total != c.top_k * c.tokens) {
      throw UsageError("static ranking counts do not sum to top_k * tokens");
    }
  }
  return c;
}

}  // namespace moespec
