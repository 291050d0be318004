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

#include "moespec/simulator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace moespec {

void CostModelParams::validate() const {
  if (!(bytes_expert >= 0.0) || !(bytes_shared >= 0.0) || !(draft_step_cost >= 0.0) ||
      !(selection_overhead_frac >= 0.0)) {
    throw UsageError("CostModelParams: all cost parameters must be >= 0");
  }
}

double CostModelParams::ar_token_cost(const ModelConfig& c) const {
  return bytes_shared +
         static_cast<double>(c.num_layers) * static_cast<double>(c.top_k) * bytes_expert;
}

std::string to_string(GenerationMode m) {
  switch (m) {
    case GenerationMode::AR: return "ar";
    case GenerationMode::SpecFull: return "spec_full";
    case GenerationMode::SpecBudgeted: return "spec_budgeted";
  }
  return "unknown";
}

VerifyOutcome accept_greedy(const DraftTree& tree, const Vec& context_logits,
                            std::span<const Vec> node_logits) {
  const std::size_t m = tree.size();
  std::vector<char> accepted(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    const TreeNode& n = tree.nodes[i];
    if (n.parent == kNoParent) {
      accepted[i] = n.token == argmax(context_logits);
    } else {
      accepted[i] = accepted[n.parent] && n.token == argmax(node_logits[n.parent]);
    }
  }
  // Deepest accepted chain; children appear after parents, so walk backwards.
  std::vector<std::size_t> height(m, 0);
  std::vector<std::size_t> best_child(m, kNoParent);
  for (std::size_t i = m; i-- > 0;) {
    if (!accepted[i]) continue;
    const std::size_t p = tree.nodes[i].parent;
    if (p == kNoParent) continue;
    const std::size_t h = height[i] + 1;
    // Indices decrease in this loop, so equal heights resolve to the lower index.
    if (best_child[p] == kNoParent || h >= height[p]) {
      best_child[p] = i;
      height[p] = h;
    }
  }
  VerifyOutcome out;
  if (m > 0 && accepted[0]) {
    for (std::size_t cur = 0; cur != kNoParent; cur = best_child[cur]) out.path.push_back(cur);
  }
  out.bonus = static_cast<TokenId>(
      argmax(out.path.empty() ? std::span<const double>(context_logits)
                              : std::span<const double>(node_logits[out.path.back()])));
  out.tau = out.path.size() + 1;
  return out;
}

VerifyOutcome verify_greedy(const MoEModel& target, const ContextCache& target_context,
                            const DraftTree& tree, ShortlistSelector* selector,
                            CoveragePolicy policy) {
  tree.validate();
  if (selector == nullptr) {
    ForwardResult fr = verify_forward_full(target, target_context, tree);
    VerifyOutcome out = accept_greedy(tree, target_context.last_logits, fr.logits);
    TreeRouting routing = routing_from(fr);
    for (std::size_t l = 0; l < routing.num_layers(); ++l) {
      out.unique_experts.push_back(expert_union(routing, l).size());
    }
    out.forward = std::move(fr);
    return out;
  }
  BudgetedForward bf = model_forward_budgeted(target, target_context, tree, *selector, policy);
  VerifyOutcome out = accept_greedy(tree, target_context.last_logits, bf.result.logits);
  for (const auto& ex : bf.executed) out.unique_experts.push_back(ex.size());
  out.coverage = std::move(bf.stats);
  out.shortlists = std::move(bf.shortlists);
  out.forward = std::move(bf.result);
  return out;
}

namespace {

double verify_cost_of(const StepReport& s, const CostModelParams& cost) {
  double c = cost.bytes_shared;
  for (std::size_t u : s.unique_experts) c += static_cast<double>(u) * cost.bytes_expert;
  if (s.budgeted) c *= 1.0 + cost.selection_overhead_frac;
  return c;
}

void price_step(StepReport& s, const CostModelParams& cost, bool ar) {
  s.verify_cost = verify_cost_of(s, cost);
  s.draft_cost = ar ? 0.0 : cost.draft_step_cost * static_cast<double>(s.tree_levels);
  s.step_cost = s.verify_cost + s.draft_cost;
}

}  // namespace

double modeled_speedup(std::span<const StepReport> steps, const CostModelParams& cost,
                       const ModelConfig& config) {
  const double ar = cost.ar_token_cost(config);
  double ar_total = 0.0;
  double spec_total = 0.0;
  for (const StepReport& s : steps) {
    for (std::size_t i = 0; i < s.emitted; ++i) ar_total += ar;
    double draft = s.tree_levels == 0 ? 0.0 : cost.draft_step_cost * static_cast<double>(s.tree_levels);
    spec_total += verify_cost_of(s, cost) + draft;
  }
  if (spec_total <= 0.0) throw DegenerateInputError("modeled_speedup: zero total cost");
  return ar_total / spec_total;
}

RunSummary summarize(std::span<const StepReport> steps, const CostModelParams& cost,
                     const ModelConfig& config) {
  RunSummary s;
  s.steps = steps.size();
  if (steps.empty()) return s;
  const std::size_t layers = steps.front().unique_experts.size();
  s.mean_unique_per_layer.assign(layers, 0.0);
  double tau = 0.0;
  for (const StepReport& r : steps) {
    s.tokens += r.emitted;
    tau += static_cast<double>(r.tau);
    for (std::size_t l = 0; l < layers; ++l) {
      s.mean_unique_per_layer[l] += static_cast<double>(r.unique_experts[l]);
      s.max_unique = std::max(s.max_unique, r.unique_experts[l]);
    }
  }
  s.mean_tau = tau / static_cast<double>(s.steps);
  for (double& u : s.mean_unique_per_layer) {
    u /= static_cast<double>(s.steps);
    s.mean_unique += u;
  }
  s.mean_unique /= static_cast<double>(layers);
  s.speedup = modeled_speedup(steps, cost, config);
  return s;
}

RunResult run_generation(const MoEModel& target, const MoEModel& draft,
                         std::span<const TokenId> prompt, std::size_t gen_len, const RunMode& mode,
                         const CostModelParams& cost, const CalibrationCounts* counts) {
  if (gen_len < 1) throw UsageError("run_generation: gen_len must be >= 1");
  cost.validate();
  const auto start = std::chrono::steady_clock::now();
  RunResult res;
  ContextCache tctx = make_context(target, prompt);
  const std::size_t layers = target.num_layers();

  if (mode.kind == GenerationMode::AR) {
    while (res.tokens.size() < gen_len) {
      auto next = static_cast<TokenId>(argmax(tctx.last_logits));
      StepReport s;
      s.step = res.steps.size();
      s.unique_experts.assign(layers, target.config.top_k);
      price_step(s, cost, true);
      res.tokens.push_back(next);
      res.steps.push_back(std::move(s));
      extend_context(target, tctx, std::span<const TokenId>(&next, 1));
    }
  } else {
    std::unique_ptr<ShortlistSelector> selector;
    CoveragePolicy policy = CoveragePolicy::Substitution;
    if (mode.kind == GenerationMode::SpecBudgeted) {
      if (!mode.budget) throw UsageError("spec_budgeted mode requires a budget");
      selector = make_selector(mode.budget->method, mode.budget->budget, counts,
                               mode.budget->uses_raw_g);
      policy = mode.budget->policy;
    }
    ContextCache dctx = make_context(draft, prompt);
    while (res.tokens.size() < gen_len) {
      DraftTree tree = build_tree(draft, dctx, mode.topology);
      VerifyOutcome v = verify_greedy(target, tctx, tree, selector.get(), policy);
      std::vector<TokenId> emitted;
      for (std::size_t node : v.path) emitted.push_back(tree.nodes[node].token);
      emitted.push_back(v.bonus);
      const std::size_t room = gen_len - res.tokens.size();
      if (emitted.size() > room) emitted.resize(room);

      StepReport s;
      s.step = res.steps.size();
      s.tau = v.tau;
      s.emitted = emitted.size();
      s.unique_experts = v.unique_experts;
      s.tree_size = tree.size();
      s.tree_levels = tree.levels();
      s.budgeted = selector != nullptr;
      for (const auto& layer : v.coverage) {
        std::vector<std::size_t> miss;
        miss.reserve(layer.size());
        for (const TokenCoverageStats& st : layer) miss.push_back(st.missing_count);
        s.missing_experts.push_back(std::move(miss));
      }
      price_step(s, cost, false);
      res.steps.push_back(std::move(s));
      res.tokens.insert(res.tokens.end(), emitted.begin(), emitted.end());
      extend_context(target, tctx, emitted);
      extend_context(draft, dctx, emitted);
    }
  }
  res.summary = summarize(res.steps, cost, target.config);
  res.summary.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return res;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

std::string SweepCell::label() const {
  std::string s = to_string(mode);
  if (mode != GenerationMode::AR) s += "/M=" + std::to_string(tree_size);
  if (budget) {
    s += "/" + to_string(budget->method) + "/" + to_string(budget->policy) +
         "/B=" + std::to_string(budget->budget);
  }
  return s;
}

std::vector<SweepCell> SweepSpec::cells() const {
  std::vector<SweepCell> out;
  out.push_back({GenerationMode::AR, 0, std::nullopt});
  for (std::size_t m : tree_sizes) {
    if (include_full) out.push_back({GenerationMode::SpecFull, m, std::nullopt});
    for (std::size_t b : budgets)
      for (RankingMethod meth : methods)
        for (CoveragePolicy pol : policies) {
          out.push_back({GenerationMode::SpecBudgeted, m, BudgetSpec{meth, pol, b, uses_raw_g}});
        }
  }
  return out;
}

PromptGenerator prompts_for_seed(std::uint64_t master_seed, std::uint64_t seed,
                                 std::size_t prompt_length, std::size_t vocab) {
  return {mix64(master_seed ^ mix64(seed + 0x5eed)), prompt_length, vocab};
}

double exact_match_rate(std::span<const TokenId> a, std::span<const TokenId> reference) {
  if (reference.empty()) throw UsageError("exact_match_rate: empty reference");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    if (i < a.size() && a[i] == reference[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(reference.size());
}

namespace {

struct JobOutput {
  std::vector<TokenId> tokens;
  std::vector<StepReport> steps;
};

RunMode mode_for(const SweepCell& cell) {
  switch (cell.mode) {
    case GenerationMode::AR: return RunMode::ar();
    case GenerationMode::SpecFull:
      return RunMode::spec_full(TreeTopology::for_size(cell.tree_size));
    case GenerationMode::SpecBudgeted:
      return RunMode::spec_budgeted(TreeTopology::for_size(cell.tree_size), *cell.budget);
  }
  throw UsageError("unknown generation mode");
}

}  // namespace

SweepResult sweep(const MoEModel& target, const MoEModel& draft, const SweepSpec& spec,
                  const CalibrationCounts* counts, int workers) {
  if (spec.seeds.empty()) throw UsageError("sweep: seeds must be non-empty");
  if (spec.prompts_per_seed == 0) throw UsageError("sweep: prompts_per_seed must be positive");
  spec.cost.validate();
  const int threads = workers < 1 ? 1 : workers;

  std::vector<std::uint64_t> seeds = spec.seeds;
  std::sort(seeds.begin(), seeds.end());
  seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());

  SweepResult result;
  result.cells = spec.cells();
  const std::size_t n_cells = result.cells.size();
  const std::size_t n_seeds = seeds.size();
  const std::size_t n_prompts = spec.prompts_per_seed;

  std::vector<std::vector<TokenId>> prompts(n_seeds * n_prompts);
  for (std::size_t s = 0; s < n_seeds; ++s) {
    PromptGenerator gen = prompts_for_seed(spec.master_seed, seeds[s], spec.prompt_length,
                                           target.config.vocab);
    for (std::size_t p = 0; p < n_prompts; ++p) prompts[s * n_prompts + p] = gen.prompt(p);
  }

  // job index = (cell * n_seeds + seed) * n_prompts + prompt; AR cells run first.
  std::vector<JobOutput> jobs(n_cells * n_seeds * n_prompts);
  auto run_job = [&](std::size_t j) {
    const std::size_t cell = j / (n_seeds * n_prompts);
    const std::size_t sp = j % (n_seeds * n_prompts);
    RunResult r = run_generation(target, draft, prompts[sp], spec.gen_len,
                                 mode_for(result.cells[cell]), spec.cost, counts);
    jobs[j].tokens = std::move(r.tokens);
    jobs[j].steps = std::move(r.steps);
  };
  const auto per_cell = static_cast<std::ptrdiff_t>(n_seeds * n_prompts);
  const auto total = static_cast<std::ptrdiff_t>(jobs.size());
  std::vector<std::string> failures(jobs.size());
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (std::ptrdiff_t j = per_cell; j < total; ++j) {
    try {
      run_job(static_cast<std::size_t>(j));
    } catch (const std::exception& e) {
      failures[j] = result.cells[static_cast<std::size_t>(j) / (n_seeds * n_prompts)].label() +
                    ": " + e.what();
    }
  }
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (std::ptrdiff_t j = 0; j < per_cell; ++j) {
    try {
      run_job(static_cast<std::size_t>(j));
    } catch (const std::exception& e) {
      failures[j] = "ar: " + std::string(e.what());
    }
  }
  std::string failed;
  for (const auto& f : failures) {
    if (!f.empty()) failed += "\n  " + f;
  }
  if (!failed.empty()) throw std::runtime_error("sweep cells failed:" + failed);

  for (std::size_t c = 0; c < n_cells; ++c) {
    for (std::size_t s = 0; s < n_seeds; ++s) {
      SweepRow row;
      row.cell = c;
      row.spec = result.cells[c];
      row.seed = seeds[s];
      row.prompts = n_prompts;
      double ar_total = 0.0, spec_total = 0.0, tau = 0.0, unique = 0.0, quality = 0.0;
      std::size_t unique_n = 0;
      std::vector<std::vector<StepReport>> kept;
      for (std::size_t p = 0; p < n_prompts; ++p) {
        const std::size_t sp = s * n_prompts + p;
        const JobOutput& job = jobs[c * n_seeds * n_prompts + sp];
        const JobOutput& ar = jobs[sp];
        row.tokens += job.tokens.size();
        row.steps += job.steps.size();
        for (const StepReport& st : job.steps) {
          tau += static_cast<double>(st.tau);
          for (std::size_t u : st.unique_experts) {
            unique += static_cast<double>(u);
            ++unique_n;
            row.max_unique = std::max(row.max_unique, u);
          }
          for (std::size_t i = 0; i < st.emitted; ++i) ar_total += spec.cost.ar_token_cost(target.config);
          spec_total += st.step_cost;
        }
        quality += exact_match_rate(job.tokens, ar.tokens);
        if (spec.keep_steps) kept.push_back(job.steps);
      }
      row.mean_tau = tau / static_cast<double>(row.steps);
      row.mean_unique = unique / static_cast<double>(unique_n);
      row.speedup = ar_total / spec_total;
      row.quality = quality / static_cast<double>(n_prompts);
      result.rows.push_back(row);
      if (spec.keep_steps) result.steps.push_back(std::move(kept));
    }
  }
  return result;
}

std::vector<CellAggregate> aggregate(const SweepResult& result) {
  std::vector<CellAggregate> out(result.cells.size());
  for (std::size_t c = 0; c < result.cells.size(); ++c) {
    out[c].cell = c;
    out[c].spec = result.cells[c];
  }
  auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  };
  for (std::size_t c = 0; c < result.cells.size(); ++c) {
    std::vector<double> sp, tau, uq, q;
    for (const SweepRow& r : result.rows) {
      if (r.cell != c) continue;
      sp.push_back(r.speedup);
      tau.push_back(r.mean_tau);
      uq.push_back(r.mean_unique);
      q.push_back(r.quality);
      out[c].max_unique = std::max(out[c].max_unique, r.max_unique);
    }
    out[c].seeds = sp.size();
    if (sp.empty()) continue;
    mean_std(sp, out[c].speedup_mean, out[c].speedup_std);
    mean_std(tau, out[c].tau_mean, out[c].tau_std);
    mean_std(uq, out[c].unique_mean, out[c].unique_std);
    mean_std(q, out[c].quality_mean, out[c].quality_std);
  }
  return out;
}

const char* const kSweepCsvColumns =
    "cell,label,mode,tree_size,budget,method,policy,seed,prompts,tokens,steps,mean_tau,"
    "mean_unique,max_unique,speedup,quality";

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_sweep_rows_csv(const SweepResult& result, std::ostream& os) {
  os << kSweepCsvColumns << '\n';
  for (const SweepRow& r : result.rows) {
    const auto& b = r.spec.budget;
    os << r.cell << ',' << r.spec.label() << ',' << to_string(r.spec.mode) << ','
       << r.spec.tree_size << ',' << (b ? std::to_string(b->budget) : "") << ','
       << (b ? to_string(b->method) : "") << ',' << (b ? to_string(b->policy) : "") << ','
       << r.seed << ',' << r.prompts << ',' << r.tokens << ',' << r.steps << ','
       << num(r.mean_tau) << ',' << num(r.mean_unique) << ',' << r.max_unique << ','
       << num(r.speedup) << ',' << num(r.quality) << '\n';
  }
}

nlohmann::ordered_json step_report_to_json(const StepReport& s) {
  return {{"step", s.step},
          {"tau", s.tau},
          {"emitted", s.emitted},
          {"unique_experts", s.unique_experts},
          {"tree_size", s.tree_size},
          {"tree_levels", s.tree_levels},
          {"budgeted", s.budgeted},
          {"verify_cost", s.verify_cost},
          {"draft_cost", s.draft_cost},
          {"step_cost", s.step_cost},
          {"missing_experts", s.missing_experts}};
}

}  // namespace moespec
