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

#include "moespec/analysis.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "moespec/kernels.hpp"

namespace moespec {

std::string to_string(ReconstructionMode m) {
  switch (m) {
    case ReconstructionMode::Truncation: return "truncation";
    case ReconstructionMode::Substitution: return "substitution";
    case ReconstructionMode::Raw: return "raw";
  }
  return "unknown";
}

ReconstructionMode parse_reconstruction_mode(const std::string& s) {
  if (s == "truncation") return ReconstructionMode::Truncation;
  if (s == "substitution") return ReconstructionMode::Substitution;
  if (s == "raw") return ReconstructionMode::Raw;
  throw UsageError("unknown reconstruction mode '" + s + "' (expected truncation|substitution|raw)");
}

double ReconstructionTerms::error() const {
  if (gold == 0.0) throw DegenerateInputError("reconstruction error: gold output is zero");
  return residual / gold;
}

namespace {

Vec sum_terms(std::span<const WeightedExpert> terms, const std::vector<std::vector<Vec>>& eo,
              std::size_t t, std::size_t d) {
  Vec out(d, 0.0);
  for (const WeightedExpert& w : terms) axpy(w.weight, eo[w.expert][t], out);
  return out;
}

}  // namespace

ReconstructionTerms reconstruction_terms(const MoELayerWeights& layer,
                                         std::span<const Vec> inputs,
                                         std::span<const RoutingRecord> routing,
                                         const Shortlist& shortlist, ReconstructionMode mode,
                                         bool uses_raw_g,
                                         const std::vector<std::vector<Vec>>* expert_outputs) {
  if (inputs.size() != routing.size()) throw UsageError("reconstruction: inputs/routing mismatch");
  if (shortlist.experts.empty()) throw UsageError("reconstruction: empty shortlist");
  std::vector<std::vector<Vec>> computed;
  if (expert_outputs == nullptr) {
    computed = kernels::expert_outputs_all(layer, inputs);
    expert_outputs = &computed;
  }
  const auto& eo = *expert_outputs;
  const std::size_t d = layer.dim();
  const auto member = shortlist.membership(layer.num_experts());

  ReconstructionTerms terms;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const RoutingRecord& rec = routing[t];
    Vec gold, approx;
    if (mode == ReconstructionMode::Raw) {
      auto g = mixing_weights(rec, rec.selected, layer.renormalize);
      std::vector<WeightedExpert> s;
      for (ExpertId j : shortlist.experts) {
        s.push_back({j, oracle_weight(rec, j, uses_raw_g, layer.renormalize)});
      }
      gold = sum_terms(g, eo, t, d);
      approx = sum_terms(s, eo, t, d);
    } else {
      auto g = mixing_weights(rec, rec.selected, layer.renormalize);
      auto policy = mode == ReconstructionMode::Truncation ? CoveragePolicy::Truncation
                                                           : CoveragePolicy::Substitution;
      auto s = budgeted_terms(layer, rec, member, policy, nullptr);
      gold = sum_terms(g, eo, t, d);
      approx = sum_terms(s, eo, t, d);
    }
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = approx[c] - gold[c];
      terms.residual += diff * diff;
    }
    terms.gold += squared_norm(gold);
  }
  return terms;
}

double reconstruction_error(const MoELayerWeights& layer, std::span<const Vec> inputs,
                            std::span<const RoutingRecord> routing, const Shortlist& shortlist,
                            ReconstructionMode mode, bool uses_raw_g) {
  return reconstruction_terms(layer, inputs, routing, shortlist, mode, uses_raw_g).error();
}

std::vector<double> teacher_forced_errors(const MoEModel& target, const ContextCache& context,
                                          const DraftTree& tree, RankingMethod method,
                                          std::size_t budget, ReconstructionMode mode,
                                          bool uses_raw_g, const CalibrationCounts* counts) {
  ForwardResult fr = verify_forward_full(target, context, tree);
  std::vector<double> errors;
  for (std::size_t l = 0; l < target.num_layers(); ++l) {
    const MoELayerWeights& w = target.blocks[l].moe;
    const LayerTrace& tr = fr.layers[l];
    auto eo = kernels::expert_outputs_all(w, tr.moe_inputs);
    Shortlist s;
    switch (method) {
      case RankingMethod::Router: s = rank_router(tr.routing, l, budget); break;
      case RankingMethod::Static:
        if (counts == nullptr) throw UsageError("static ranking requires calibration counts");
        s = rank_static(*counts, l, budget);
        break;
      case RankingMethod::Oracle:
        s = rank_oracle(w, l, tr.moe_inputs, tr.routing, std::min(budget, w.num_experts()),
                        uses_raw_g, &eo);
        break;
    }
    errors.push_back(
        reconstruction_terms(w, tr.moe_inputs, tr.routing, s, mode, uses_raw_g, &eo).error());
  }
  return errors;
}

Vec coverage_curve(std::span<const RoutingRecord> routing) {
  if (routing.empty()) throw UsageError("coverage_curve: no routing records");
  Vec s(routing.front().probs.size(), 0.0);
  for (const RoutingRecord& rec : routing) {
    if (rec.probs.size() != s.size()) throw UsageError("coverage_curve: inconsistent N");
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += rec.probs[i];
  }
  std::vector<std::size_t> order = top_k_indices(s, s.size());
  Vec curve(s.size());
  double acc = 0.0;
  for (std::size_t b = 0; b < order.size(); ++b) {
    acc += s[order[b]];
    curve[b] = acc;
  }
  if (acc <= 0.0) throw DegenerateInputError("coverage_curve: zero routing mass");
  for (double& v : curve) v /= acc;
  return curve;
}

Vec coverage_curve(const TreeRouting& routing, std::size_t layer) {
  if (layer >= routing.num_layers()) throw UsageError("coverage_curve: layer out of range");
  return coverage_curve(routing.layers[layer]);
}

Rational expected_pair_probability(std::uint64_t num_experts, std::uint64_t top_k) {
  if (num_experts < 2 || top_k > num_experts) {
    throw UsageError("expected_pair_probability: need N >= 2 and k <= N");
  }
  std::uint64_t num = top_k * (top_k - 1);
  std::uint64_t den = num_experts * (num_experts - 1);
  std::uint64_t g = std::gcd(num, den);
  if (g == 0) g = 1;
  return {num / g, den / g};
}

CoactivationMatrix::CoactivationMatrix(std::size_t layer_, std::size_t n, std::size_t k)
    : layer(layer_), num_experts(n), top_k(k), counts(n * n, 0) {}

void CoactivationMatrix::add(const RoutingRecord& rec) {
  for (ExpertId i : rec.selected) {
    if (i >= num_experts) throw UsageError("coactivation: expert index out of range");
    for (ExpertId j : rec.selected) ++counts[i * num_experts + j];
  }
  ++tokens_observed;
}

void CoactivationMatrix::merge(const CoactivationMatrix& other) {
  if (other.num_experts != num_experts) throw UsageError("coactivation: cannot merge different N");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  tokens_observed += other.tokens_observed;
}

std::uint64_t CoactivationMatrix::max_pair() const {
  std::uint64_t best = 0;
  for (std::size_t i = 0; i < num_experts; ++i)
    for (std::size_t j = 0; j < num_experts; ++j)
      if (i != j) best = std::max(best, counts[i * num_experts + j]);
  return best;
}

double CoactivationMatrix::concentration() const {
  if (tokens_observed == 0) throw DegenerateInputError("coactivation: no tokens observed");
  const double expected =
      static_cast<double>(tokens_observed) * expected_pair_probability(num_experts, top_k).value();
  if (expected == 0.0) throw DegenerateInputError("coactivation: k < 2 has no expert pairs");
  return static_cast<double>(max_pair()) / expected;
}

CoactivationMatrix coactivation(std::span<const RoutingRecord> routing, std::size_t layer,
                                std::size_t top_k) {
  if (routing.empty()) throw UsageError("coactivation: no tokens observed");
  CoactivationMatrix m(layer, routing.front().probs.size(), top_k);
  for (const RoutingRecord& rec : routing) m.add(rec);
  return m;
}

std::vector<ParetoRow> pareto_table(std::span<const CellAggregate> cells) {
  const CellAggregate* ar = nullptr;
  for (const CellAggregate& c : cells) {
    if (c.spec.mode == GenerationMode::AR && c.seeds > 0) ar = &c;
  }
  if (ar == nullptr) throw UsageError("pareto_table: sweep has no AR baseline cell");
  std::vector<ParetoRow> rows;
  for (const CellAggregate& c : cells) {
    if (c.seeds == 0) continue;
    ParetoRow r;
    r.label = c.spec.label();
    r.mode = c.spec.mode;
    r.tree_size = c.spec.tree_size;
    r.budget = c.spec.budget;
    r.quality_pct = 100.0 * c.quality_mean / ar->quality_mean;
    r.speedup = c.speedup_mean / ar->speedup_mean;
    rows.push_back(r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ParetoRow& a, const ParetoRow& b) {
    if (a.speedup != b.speedup) return a.speedup < b.speedup;
    return a.label < b.label;
  });
  return rows;
}

std::vector<TraceRecord> read_trace(std::istream& is, std::size_t default_k, std::size_t default_n) {
  std::vector<TraceRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("trace line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.contains("layer")) {
      throw UsageError("trace line " + std::to_string(line_no) + ": missing 'layer'");
    }
    TraceRecord tr;
    tr.layer = j.at("layer").get<std::size_t>();
    tr.group = j.value("tree", std::uint64_t{0});
    const std::size_t k = j.value("k", default_k);
    if (j.contains("probs")) {
      tr.record.probs = j.at("probs").get<Vec>();
      if (j.contains("selected")) {
        tr.record.selected = j.at("selected").get<std::vector<ExpertId>>();
      } else {
        tr.record.selected = top_k_indices(tr.record.probs, std::min(k, tr.record.probs.size()));
      }
    } else if (j.contains("topk")) {
      const std::size_t n = j.value("n_experts", default_n);
      tr.record.probs.assign(n, 0.0);
      std::vector<ExpertId> listed;
      for (const auto& pair : j.at("topk")) {
        auto idx = pair.at(0).get<std::size_t>();
        if (idx >= n) {
          throw UsageError("trace line " + std::to_string(line_no) + ": expert " +
                           std::to_string(idx) + " >= n_experts " + std::to_string(n));
        }
        tr.record.probs[idx] = pair.at(1).get<double>();
        listed.push_back(idx);
      }
      Vec listed_probs;
      for (ExpertId e : listed) listed_probs.push_back(tr.record.probs[e]);
      for (std::size_t pos : top_k_indices(listed_probs, listed_probs.size())) {
        tr.record.selected.push_back(listed[pos]);
      }
    } else {
      throw UsageError("trace line " + std::to_string(line_no) + ": needs 'probs' or 'topk'");
    }
    for (ExpertId e : tr.record.selected) {
      if (e >= tr.record.probs.size()) {
        throw UsageError("trace line " + std::to_string(line_no) + ": selected expert out of range");
      }
    }
    out.push_back(std::move(tr));
  }
  return out;
}

void write_routing_jsonl(std::ostream& os, std::size_t layer, std::uint64_t group,
                         std::span<const RoutingRecord> records) {
  for (const RoutingRecord& r : records) {
    nlohmann::ordered_json j = {
        {"layer", layer}, {"tree", group}, {"probs", r.probs}, {"selected", r.selected}};
    os << j.dump() << '\n';
  }
}

std::vector<RoutingRecord> records_for_layer(std::span<const TraceRecord> trace, std::size_t layer) {
  std::vector<RoutingRecord> out;
  for (const TraceRecord& t : trace) {
    if (t.layer == layer) out.push_back(t.record);
  }
  return out;
}

std::size_t trace_layers(std::span<const TraceRecord> trace) {
  std::size_t n = 0;
  for (const TraceRecord& t : trace) n = std::max(n, t.layer + 1);
  return n;
}

std::vector<StepReport> read_step_reports(std::istream& is) {
  std::vector<StepReport> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.contains("header")) continue;
    StepReport s;
    s.step = j.at("step");
    s.tau = j.at("tau");
    s.emitted = j.at("emitted");
    s.unique_experts = j.at("unique_experts").get<std::vector<std::size_t>>();
    s.tree_size = j.at("tree_size");
    s.tree_levels = j.at("tree_levels");
    s.budgeted = j.at("budgeted");
    s.verify_cost = j.at("verify_cost");
    s.draft_cost = j.at("draft_cost");
    s.step_cost = j.at("step_cost");
    s.missing_experts = j.at("missing_experts").get<std::vector<std::vector<std::size_t>>>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace moespec
