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

#include "moespec/experiment.hpp"
#include "moespec/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

namespace moespec {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

const char* const kCoverageCsvColumns = "layer,budget,coverage_mean,coverage_min,coverage_max,groups";
const char* const kConcentrationCsvColumns =
    "layer,tokens,max_pair,expected_pair_prob,concentration";
const char* const kReconstructionCsvColumns =
    "method,budget,mode,uses_raw_g,trees,mean_error,std_error";
const char* const kUnionGrowthCsvColumns = "tree_size,layer,mean_union";
const char* const kAblateCsvColumns =
    "cell,label,mode,tree_size,budget,method,policy,seeds,speedup_mean,speedup_std,tau_mean,"
    "tau_std,unique_mean,unique_std,max_unique,quality_mean,quality_std";
const char* const kParetoCsvColumns = "label,mode,tree_size,budget,method,policy,quality_pct,speedup";

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::size_t> default_budgets(std::size_t n) {
  std::set<std::size_t> b{std::max<std::size_t>(1, n / 4), std::max<std::size_t>(1, n / 2), n};
  return {b.begin(), b.end()};
}

std::vector<std::size_t> resolved_budgets(const ExperimentConfig& c) {
  return c.budgets.empty() ? default_budgets(c.model.num_experts) : c.budgets;
}

[[noreturn]] void field_error(const std::string& field, const std::string& what) {
  throw UsageError("config field '" + field + "' " + what);
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  if (tree_sizes.empty()) field_error("tree_sizes", "must be non-empty");
  for (std::size_t m : tree_sizes) {
    try {
      TreeTopology::for_size(m);
    } catch (const UsageError& e) {
      field_error("tree_sizes", e.what());
    }
  }
  for (std::size_t b : resolved_budgets(*this)) {
    if (b < 1 || b > model.num_experts) {
      field_error("budgets", "entries must lie in [1, N=" + std::to_string(model.num_experts) +
                                 "], got " + std::to_string(b));
    }
  }
  if (methods.empty()) field_error("methods", "must be non-empty");
  if (policies.empty()) field_error("policies", "must be non-empty");
  if (seeds.empty()) field_error("seeds", "must be non-empty");
  if (gen_len < 1) field_error("gen_len", "must be >= 1");
  if (prompts < 1) field_error("prompts", "must be >= 1");
  if (prompt_length < 1) field_error("prompt_length", "must be >= 1");
  if (trees < 1) field_error("trees", "must be >= 1");
  if (calibration_tokens < 1) field_error("calibration_tokens", "must be >= 1");
  if (workers < 1) field_error("workers", "must be >= 1");
  if (!(draft.noise_std >= 0.0)) field_error("draft.noise_std", "must be >= 0");
  if (draft.layers_kept && (*draft.layers_kept < 1 || *draft.layers_kept > model.num_layers)) {
    field_error("draft.layers_kept", "must lie in [1, num_layers]");
  }
  try {
    cost.validate();
  } catch (const UsageError& e) {
    field_error("cost", e.what());
  }
}

ordered_json ExperimentConfig::to_json() const {
  ordered_json methods_j = ordered_json::array(), policies_j = ordered_json::array();
  for (auto m : methods) methods_j.push_back(to_string(m));
  for (auto p : policies) policies_j.push_back(to_string(p));
  ordered_json j;
  j["preset"] = preset;
  j["model"] = {{"d", model.d},
                {"d_ff", model.d_ff},
                {"num_experts", model.num_experts},
                {"top_k", model.top_k},
                {"num_layers", model.num_layers},
                {"vocab", model.vocab},
                {"renormalize", model.renormalize},
                {"skew", model.skew}};
  j["seed"] = seed;
  j["draft"] = {{"noise_std", draft.noise_std},
                {"layers_kept", draft.layers_kept ? ordered_json(*draft.layers_kept)
                                                  : ordered_json(nullptr)}};
  j["tree_sizes"] = tree_sizes;
  j["budgets"] = resolved_budgets(*this);
  j["methods"] = methods_j;
  j["policies"] = policies_j;
  j["seeds"] = seeds;
  j["gen_len"] = gen_len;
  j["prompts"] = prompts;
  j["prompt_length"] = prompt_length;
  j["trees"] = trees;
  j["calibration_tokens"] = calibration_tokens;
  j["uses_raw_g"] = uses_raw_g;
  j["reconstruction_mode"] = to_string(reconstruction_mode);
  j["cost"] = {{"bytes_expert", cost.bytes_expert},
               {"bytes_shared", cost.bytes_shared},
               {"draft_step_cost", cost.draft_step_cost},
               {"selection_overhead_frac", cost.selection_overhead_frac}};
  j["static_ranking_file"] = static_ranking_file ? ordered_json(*static_ranking_file) : ordered_json(nullptr);
  j["trace_file"] = trace_file ? ordered_json(*trace_file) : ordered_json(nullptr);
  j["dump_steps"] = dump_steps;
  // out_dir and workers are deliberately not echoed: outputs must not depend on them.
  return j;
}

namespace {

template <typename T>
T get_field(const json& j, const std::string& key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    field_error(path.empty() ? key : path + "." + key, "has the wrong type");
  }
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) field_error(where.empty() ? "<root>" : where, "must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) {
      field_error(where.empty() ? key : where + "." + key, "is not a recognized setting");
    }
  }
}

}  // namespace

ExperimentConfig apply_config_json(ExperimentConfig c, const json& j) {
  check_keys(j, {"preset", "model", "seed", "draft", "tree_sizes", "budgets", "methods", "policies",
                 "seeds", "gen_len", "prompts", "prompt_length", "trees", "calibration_tokens",
                 "uses_raw_g", "reconstruction_mode", "cost", "static_ranking_file", "trace_file",
                 "dump_steps", "out_dir", "workers"},
             "");
  if (j.contains("preset")) {
    c.preset = get_field<std::string>(j, "preset", "");
    c.model = ModelConfig::preset(c.preset);
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"d", "d_ff", "num_experts", "top_k", "num_layers", "vocab", "renormalize", "skew"},
               "model");
    if (m.contains("d")) c.model.d = get_field<std::size_t>(m, "d", "model");
    if (m.contains("d_ff")) c.model.d_ff = get_field<std::size_t>(m, "d_ff", "model");
    if (m.contains("num_experts")) c.model.num_experts = get_field<std::size_t>(m, "num_experts", "model");
    if (m.contains("top_k")) c.model.top_k = get_field<std::size_t>(m, "top_k", "model");
    if (m.contains("num_layers")) c.model.num_layers = get_field<std::size_t>(m, "num_layers", "model");
    if (m.contains("vocab")) c.model.vocab = get_field<std::size_t>(m, "vocab", "model");
    if (m.contains("renormalize")) c.model.renormalize = get_field<bool>(m, "renormalize", "model");
    if (m.contains("skew")) c.model.skew = get_field<double>(m, "skew", "model");
  }
  if (j.contains("seed")) c.seed = get_field<std::uint64_t>(j, "seed", "");
  if (j.contains("draft")) {
    const json& d = j.at("draft");
    check_keys(d, {"noise_std", "layers_kept"}, "draft");
    if (d.contains("noise_std")) c.draft.noise_std = get_field<double>(d, "noise_std", "draft");
    if (d.contains("layers_kept")) {
      if (d.at("layers_kept").is_null()) c.draft.layers_kept.reset();
      else c.draft.layers_kept = get_field<std::size_t>(d, "layers_kept", "draft");
    }
  }
  if (j.contains("tree_sizes")) {
    c.tree_sizes = get_field<std::vector<std::size_t>>(j, "tree_sizes", "");
    if (c.tree_sizes.empty()) field_error("tree_sizes", "must be non-empty");
  }
  if (j.contains("budgets")) {
    c.budgets = get_field<std::vector<std::size_t>>(j, "budgets", "");
    if (c.budgets.empty()) field_error("budgets", "must be non-empty");
  }
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& s : get_field<std::vector<std::string>>(j, "methods", "")) {
      c.methods.push_back(parse_ranking_method(s));
    }
    if (c.methods.empty()) field_error("methods", "must be non-empty");
  }
  if (j.contains("policies")) {
    c.policies.clear();
    for (const auto& s : get_field<std::vector<std::string>>(j, "policies", "")) {
      c.policies.push_back(parse_coverage_policy(s));
    }
    if (c.policies.empty()) field_error("policies", "must be non-empty");
  }
  if (j.contains("seeds")) {
    c.seeds = get_field<std::vector<std::uint64_t>>(j, "seeds", "");
    if (c.seeds.empty()) field_error("seeds", "must be non-empty");
  }
  if (j.contains("gen_len")) c.gen_len = get_field<std::size_t>(j, "gen_len", "");
  if (j.contains("prompts")) c.prompts = get_field<std::size_t>(j, "prompts", "");
  if (j.contains("prompt_length")) c.prompt_length = get_field<std::size_t>(j, "prompt_length", "");
  if (j.contains("trees")) c.trees = get_field<std::size_t>(j, "trees", "");
  if (j.contains("calibration_tokens")) {
    c.calibration_tokens = get_field<std::size_t>(j, "calibration_tokens", "");
  }
  if (j.contains("uses_raw_g")) c.uses_raw_g = get_field<bool>(j, "uses_raw_g", "");
  if (j.contains("reconstruction_mode")) {
    c.reconstruction_mode =
        parse_reconstruction_mode(get_field<std::string>(j, "reconstruction_mode", ""));
  }
  if (j.contains("cost")) {
    const json& k = j.at("cost");
    check_keys(k, {"bytes_expert", "bytes_shared", "draft_step_cost", "selection_overhead_frac"},
               "cost");
    if (k.contains("bytes_expert")) c.cost.bytes_expert = get_field<double>(k, "bytes_expert", "cost");
    if (k.contains("bytes_shared")) c.cost.bytes_shared = get_field<double>(k, "bytes_shared", "cost");
    if (k.contains("draft_step_cost")) {
      c.cost.draft_step_cost = get_field<double>(k, "draft_step_cost", "cost");
    }
    if (k.contains("selection_overhead_frac")) {
      c.cost.selection_overhead_frac = get_field<double>(k, "selection_overhead_frac", "cost");
    }
  }
  if (j.contains("static_ranking_file")) {
    if (j.at("static_ranking_file").is_null()) c.static_ranking_file.reset();
    else c.static_ranking_file = get_field<std::string>(j, "static_ranking_file", "");
  }
  if (j.contains("trace_file")) {
    if (j.at("trace_file").is_null()) c.trace_file.reset();
    else c.trace_file = get_field<std::string>(j, "trace_file", "");
  }
  if (j.contains("dump_steps")) c.dump_steps = get_field<bool>(j, "dump_steps", "");
  if (j.contains("out_dir")) c.out_dir = get_field<std::string>(j, "out_dir", "");
  if (j.contains("workers")) c.workers = get_field<int>(j, "workers", "");
  return c;
}

ExperimentConfig load_config_file(const fs::path& path, ExperimentConfig base) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw UsageError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return apply_config_json(std::move(base), j);
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kDraftStream = 0xd4af7ULL;
constexpr std::uint64_t kCalibrationStream = 0xca11b0ULL;
constexpr std::uint64_t kAnalysisStream = 0xa7a1ULL;

struct Models {
  MoEModel target;
  MoEModel draft;
};

Models build_models(const ExperimentConfig& cfg) {
  ModelConfig mc = cfg.model;
  mc.seed = cfg.seed;
  Models m{build_target(mc), {}};
  Rng rng(cfg.seed, kDraftStream);
  m.draft = derive_draft(m.target, cfg.draft, rng);
  return m;
}

ordered_json header_json(const ExperimentConfig& cfg, const std::string& command) {
  return {{"tool", "moespec"},
          {"version", kToolVersion},
          {"command", command},
          {"seed", cfg.seed},
          {"config", cfg.to_json()}};
}

void write_csv_header(std::ostream& os, const ExperimentConfig& cfg, const std::string& command) {
  os << "# moespec " << kToolVersion << '\n';
  os << "# command: " << command << '\n';
  os << "# seed: " << cfg.seed << '\n';
  os << "# config: " << cfg.to_json().dump() << '\n';
}

class OutputDir {
 public:
  OutputDir(const ExperimentConfig& cfg, std::string command)
      : cfg_(cfg), command_(std::move(command)), dir_(cfg.out_dir) {
    fs::create_directories(dir_);
  }

  // Opens a CSV file and writes the header block.
  std::ofstream csv(const std::string& name) {
    fs::path p = dir_ / name;
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    write_csv_header(os, cfg_, command_);
    written_.push_back(p);
    return os;
  }

  std::ofstream raw(const std::string& name) {
    fs::path p = dir_ / name;
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    written_.push_back(p);
    return os;
  }

  // JSON lines; the first line is {"header": ...}.
  std::ofstream jsonl(const std::string& name) {
    auto os = raw(name);
    os << ordered_json{{"header", header_json(cfg_, command_)}}.dump() << '\n';
    return os;
  }

  void json_file(const std::string& name, ordered_json body) {
    ordered_json doc;
    doc["header"] = header_json(cfg_, command_);
    for (auto& [k, v] : body.items()) doc[k] = v;
    auto os = raw(name);
    os << doc.dump(2) << '\n';
  }

  const fs::path& dir() const { return dir_; }
  std::vector<fs::path> written() const { return written_; }

 private:
  const ExperimentConfig& cfg_;
  std::string command_;
  fs::path dir_;
  std::vector<fs::path> written_;
};

bool needs_static(const ExperimentConfig& cfg) {
  return std::find(cfg.methods.begin(), cfg.methods.end(), RankingMethod::Static) !=
         cfg.methods.end();
}

CalibrationCounts calibration_counts(const ExperimentConfig& cfg, const MoEModel& target) {
  if (cfg.static_ranking_file) {
    std::ifstream is(*cfg.static_ranking_file);
    if (!is) throw UsageError("cannot open static ranking file " + *cfg.static_ranking_file);
    CalibrationCounts c = counts_from_json(json::parse(is));
    if (c.counts.size() != target.num_layers() || c.counts.front().size() != target.config.num_experts) {
      throw UsageError("static ranking file does not match the model's L and N");
    }
    return c;
  }
  PromptGenerator gen{mix64(cfg.seed ^ kCalibrationStream), cfg.prompt_length, target.config.vocab};
  auto stream = calibration_stream(gen, cfg.calibration_tokens);
  return calibrate_static(target, stream, cfg.workers);
}

PromptGenerator analysis_prompts(const ExperimentConfig& cfg) {
  return {mix64(cfg.seed ^ kAnalysisStream), cfg.prompt_length, cfg.model.vocab};
}

SweepSpec sweep_spec(const ExperimentConfig& cfg) {
  SweepSpec s;
  s.tree_sizes = cfg.tree_sizes;
  s.budgets = resolved_budgets(cfg);
  s.methods = cfg.methods;
  s.policies = cfg.policies;
  s.seeds = cfg.seeds;
  s.prompts_per_seed = cfg.prompts;
  s.gen_len = cfg.gen_len;
  s.prompt_length = cfg.prompt_length;
  s.uses_raw_g = cfg.uses_raw_g;
  s.master_seed = cfg.seed;
  s.cost = cfg.cost;
  s.keep_steps = cfg.dump_steps;
  return s;
}

ordered_json aggregates_json(const std::vector<CellAggregate>& agg) {
  ordered_json cells = ordered_json::array();
  for (const CellAggregate& a : agg) {
    const auto& b = a.spec.budget;
    cells.push_back({{"cell", a.cell},
                     {"label", a.spec.label()},
                     {"mode", to_string(a.spec.mode)},
                     {"tree_size", a.spec.tree_size},
                     {"budget", b ? ordered_json(b->budget) : ordered_json(nullptr)},
                     {"method", b ? ordered_json(to_string(b->method)) : ordered_json(nullptr)},
                     {"policy", b ? ordered_json(to_string(b->policy)) : ordered_json(nullptr)},
                     {"seeds", a.seeds},
                     {"speedup", {{"mean", a.speedup_mean}, {"std", a.speedup_std}}},
                     {"tau", {{"mean", a.tau_mean}, {"std", a.tau_std}}},
                     {"unique_experts", {{"mean", a.unique_mean}, {"std", a.unique_std}}},
                     {"max_unique", a.max_unique},
                     {"quality", {{"mean", a.quality_mean}, {"std", a.quality_std}}}});
  }
  return cells;
}

void write_pareto_csv(std::ostream& os, const std::vector<ParetoRow>& rows) {
  os << kParetoCsvColumns << '\n';
  for (const ParetoRow& r : rows) {
    os << r.label << ',' << to_string(r.mode) << ',' << r.tree_size << ','
       << (r.budget ? std::to_string(r.budget->budget) : "") << ','
       << (r.budget ? to_string(r.budget->method) : "") << ','
       << (r.budget ? to_string(r.budget->policy) : "") << ',' << num(r.quality_pct) << ','
       << num(r.speedup) << '\n';
  }
}

void dump_steps(OutputDir& out, const SweepResult& result) {
  auto os = out.jsonl("steps.jsonl");
  for (std::size_t r = 0; r < result.rows.size(); ++r) {
    const SweepRow& row = result.rows[r];
    for (std::size_t p = 0; p < result.steps[r].size(); ++p) {
      for (const StepReport& s : result.steps[r][p]) {
        ordered_json j = {{"cell", row.cell}, {"label", row.spec.label()}, {"seed", row.seed},
                          {"prompt", p}};
        const ordered_json step = step_report_to_json(s);
        for (const auto& [k, v] : step.items()) j[k] = v;
        os << j.dump() << '\n';
      }
    }
  }
}

// Routing of the target over `cfg.trees` analysis trees at the first tree size.
std::vector<TreeRouting> analysis_routings(const ExperimentConfig& cfg, const Models& m) {
  const TreeTopology topo = TreeTopology::for_size(cfg.tree_sizes.front());
  const PromptGenerator gen = analysis_prompts(cfg);
  std::vector<TreeRouting> out(cfg.trees);
  parallel_for(cfg.trees, cfg.workers, [&](std::size_t i) {
    auto prompt = gen.prompt(i);
    ContextCache tctx = make_context(m.target, prompt);
    ContextCache dctx = make_context(m.draft, prompt);
    DraftTree tree = build_tree(m.draft, dctx, topo);
    out[i] = routing_from(verify_forward_full(m.target, tctx, tree));
  });
  return out;
}

// groups[layer][group] -> records
using GroupedRecords = std::vector<std::vector<std::vector<RoutingRecord>>>;

GroupedRecords group_trace(const std::vector<TraceRecord>& trace) {
  const std::size_t layers = trace_layers(trace);
  std::vector<std::uint64_t> ids;
  for (const TraceRecord& t : trace) ids.push_back(t.group);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  GroupedRecords g(layers, std::vector<std::vector<RoutingRecord>>(ids.size()));
  for (const TraceRecord& t : trace) {
    auto pos = static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), t.group) - ids.begin());
    g[t.layer][pos].push_back(t.record);
  }
  return g;
}

GroupedRecords group_routings(const std::vector<TreeRouting>& routings, std::size_t layers) {
  GroupedRecords g(layers);
  for (const TreeRouting& r : routings)
    for (std::size_t l = 0; l < layers; ++l) g[l].push_back(r.layers[l]);
  return g;
}

std::vector<TraceRecord> load_trace(const ExperimentConfig& cfg) {
  std::ifstream is(*cfg.trace_file);
  if (!is) throw UsageError("cannot open trace file " + *cfg.trace_file);
  auto trace = read_trace(is, cfg.model.top_k, cfg.model.num_experts);
  if (trace.empty()) throw UsageError("trace file " + *cfg.trace_file + " has no records");
  return trace;
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

std::vector<fs::path> cmd_simulate(const ExperimentConfig& cfg) {
  cfg.validate();
  Models m = build_models(cfg);
  CalibrationCounts counts;
  if (needs_static(cfg)) counts = calibration_counts(cfg, m.target);
  SweepResult result = sweep(m.target, m.draft, sweep_spec(cfg), &counts, cfg.workers);

  OutputDir out(cfg, "simulate");
  {
    auto os = out.csv("sweep.csv");
    write_sweep_rows_csv(result, os);
  }
  auto agg = aggregate(result);
  out.json_file("summary.json", {{"cells", aggregates_json(agg)}});

  std::vector<std::size_t> sizes = cfg.tree_sizes;
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  auto growth = union_growth_curve(m.target, m.draft, analysis_prompts(cfg), sizes, cfg.trees,
                                   cfg.workers);
  {
    auto os = out.csv("union_growth.csv");
    os << kUnionGrowthCsvColumns << '\n';
    for (const UnionGrowthPoint& p : growth) {
      for (std::size_t l = 0; l < p.mean_union_per_layer.size(); ++l) {
        os << p.tree_size << ',' << l << ',' << num(p.mean_union_per_layer[l]) << '\n';
      }
      os << p.tree_size << ",mean," << num(p.mean_union) << '\n';
    }
  }
  if (cfg.dump_steps) dump_steps(out, result);
  return out.written();
}

std::vector<fs::path> cmd_ablate(const ExperimentConfig& cfg) {
  cfg.validate();
  Models m = build_models(cfg);
  CalibrationCounts counts;
  if (needs_static(cfg)) counts = calibration_counts(cfg, m.target);
  SweepResult result = sweep(m.target, m.draft, sweep_spec(cfg), &counts, cfg.workers);
  auto agg = aggregate(result);
  auto pareto = pareto_table(agg);

  OutputDir out(cfg, "ablate");
  {
    auto os = out.csv("ablate.csv");
    os << kAblateCsvColumns << '\n';
    for (const CellAggregate& a : agg) {
      const auto& b = a.spec.budget;
      os << a.cell << ',' << a.spec.label() << ',' << to_string(a.spec.mode) << ','
         << a.spec.tree_size << ',' << (b ? std::to_string(b->budget) : "") << ','
         << (b ? to_string(b->method) : "") << ',' << (b ? to_string(b->policy) : "") << ','
         << a.seeds << ',' << num(a.speedup_mean) << ',' << num(a.speedup_std) << ','
         << num(a.tau_mean) << ',' << num(a.tau_std) << ',' << num(a.unique_mean) << ','
         << num(a.unique_std) << ',' << a.max_unique << ',' << num(a.quality_mean) << ','
         << num(a.quality_std) << '\n';
    }
  }
  {
    auto os = out.csv("pareto.csv");
    write_pareto_csv(os, pareto);
  }
  out.json_file("summary.json", {{"cells", aggregates_json(agg)}});
  if (cfg.dump_steps) dump_steps(out, result);
  return out.written();
}

std::vector<fs::path> cmd_coverage(const ExperimentConfig& cfg) {
  cfg.validate();
  GroupedRecords groups;
  if (cfg.trace_file) {
    groups = group_trace(load_trace(cfg));
  } else {
    Models m = build_models(cfg);
    groups = group_routings(analysis_routings(cfg, m), m.target.num_layers());
  }
  OutputDir out(cfg, "coverage");
  auto os = out.csv("coverage.csv");
  os << kCoverageCsvColumns << '\n';
  for (std::size_t l = 0; l < groups.size(); ++l) {
    std::vector<Vec> curves;
    for (const auto& recs : groups[l]) {
      if (!recs.empty()) curves.push_back(coverage_curve(recs));
    }
    if (curves.empty()) continue;
    const std::size_t n = curves.front().size();
    for (std::size_t b = 0; b < n; ++b) {
      double sum = 0.0, lo = curves.front()[b], hi = curves.front()[b];
      for (const Vec& c : curves) {
        if (c.size() != n) throw UsageError("coverage: groups disagree on N");
        sum += c[b];
        lo = std::min(lo, c[b]);
        hi = std::max(hi, c[b]);
      }
      os << l << ',' << (b + 1) << ',' << num(sum / static_cast<double>(curves.size())) << ','
         << num(lo) << ',' << num(hi) << ',' << curves.size() << '\n';
    }
  }
  return out.written();
}

std::vector<fs::path> cmd_coactivation(const ExperimentConfig& cfg) {
  cfg.validate();
  GroupedRecords groups;
  if (cfg.trace_file) {
    groups = group_trace(load_trace(cfg));
  } else {
    Models m = build_models(cfg);
    groups = group_routings(analysis_routings(cfg, m), m.target.num_layers());
  }
  OutputDir out(cfg, "coactivation");
  std::vector<CoactivationMatrix> mats;
  for (std::size_t l = 0; l < groups.size(); ++l) {
    std::vector<RoutingRecord> all;
    for (const auto& recs : groups[l]) all.insert(all.end(), recs.begin(), recs.end());
    if (all.empty()) continue;
    const std::size_t k = all.front().selected.size();
    mats.push_back(coactivation(all, l, k));
  }
  for (const CoactivationMatrix& mat : mats) {
    auto os = out.csv("coactivation_layer" + std::to_string(mat.layer) + ".csv");
    for (std::size_t i = 0; i < mat.num_experts; ++i) {
      for (std::size_t j = 0; j < mat.num_experts; ++j) os << (j ? "," : "") << mat(i, j);
      os << '\n';
    }
  }
  auto os = out.csv("concentration.csv");
  os << kConcentrationCsvColumns << '\n';
  for (const CoactivationMatrix& mat : mats) {
    const bool has_pairs = mat.top_k >= 2 && mat.num_experts >= 2;
    os << mat.layer << ',' << mat.tokens_observed << ',' << mat.max_pair() << ','
       << (has_pairs ? num(expected_pair_probability(mat.num_experts, mat.top_k).value()) : "")
       << ',' << (has_pairs ? num(mat.concentration()) : "") << '\n';
  }
  return out.written();
}

std::vector<fs::path> cmd_reconstruct(const ExperimentConfig& cfg) {
  cfg.validate();
  Models m = build_models(cfg);
  CalibrationCounts counts;
  if (needs_static(cfg)) counts = calibration_counts(cfg, m.target);
  const auto budgets = resolved_budgets(cfg);
  const TreeTopology topo = TreeTopology::for_size(cfg.tree_sizes.front());
  const PromptGenerator gen = analysis_prompts(cfg);

  // errors[tree][method][budget] = layer-averaged error
  std::vector<std::vector<std::vector<double>>> errors(
      cfg.trees, std::vector<std::vector<double>>(cfg.methods.size(), std::vector<double>(budgets.size())));
  parallel_for(cfg.trees, cfg.workers, [&](std::size_t i) {
    auto prompt = gen.prompt(i);
    ContextCache tctx = make_context(m.target, prompt);
    DraftTree tree = build_tree(m.draft, make_context(m.draft, prompt), topo);
    for (std::size_t a = 0; a < cfg.methods.size(); ++a) {
      for (std::size_t b = 0; b < budgets.size(); ++b) {
        auto per_layer = teacher_forced_errors(m.target, tctx, tree, cfg.methods[a], budgets[b],
                                               cfg.reconstruction_mode, cfg.uses_raw_g, &counts);
        double s = 0.0;
        for (double e : per_layer) s += e;
        errors[i][a][b] = s / static_cast<double>(per_layer.size());
      }
    }
  });

  OutputDir out(cfg, "reconstruct");
  auto os = out.csv("reconstruction.csv");
  os << kReconstructionCsvColumns << '\n';
  for (std::size_t a = 0; a < cfg.methods.size(); ++a) {
    for (std::size_t b = 0; b < budgets.size(); ++b) {
      double mean = 0.0;
      for (std::size_t i = 0; i < cfg.trees; ++i) mean += errors[i][a][b];
      mean /= static_cast<double>(cfg.trees);
      double ss = 0.0;
      for (std::size_t i = 0; i < cfg.trees; ++i) ss += (errors[i][a][b] - mean) * (errors[i][a][b] - mean);
      double sd = cfg.trees > 1 ? std::sqrt(ss / static_cast<double>(cfg.trees - 1)) : 0.0;
      os << to_string(cfg.methods[a]) << ',' << budgets[b] << ','
         << to_string(cfg.reconstruction_mode) << ',' << (cfg.uses_raw_g ? "true" : "false") << ','
         << cfg.trees << ',' << num(mean) << ',' << num(sd) << '\n';
    }
  }
  return out.written();
}

std::vector<fs::path> cmd_calibrate_static(const ExperimentConfig& cfg) {
  cfg.validate();
  Models m = build_models(cfg);
  ExperimentConfig fresh = cfg;
  fresh.static_ranking_file.reset();
  CalibrationCounts counts = calibration_counts(fresh, m.target);
  OutputDir out(cfg, "calibrate-static");
  ordered_json body = counts_to_json(counts);
  out.json_file("static_ranking.json", body);
  return out.written();
}

std::vector<fs::path> cmd_export_model(const ExperimentConfig& cfg) {
  cfg.validate();
  Models m = build_models(cfg);
  OutputDir out(cfg, "export-model");
  save_model(m.target, out.dir() / "target.bin");
  save_model(m.draft, out.dir() / "draft.bin");
  out.json_file("model.json", {{"files", {"target.bin", "draft.bin"}},
                               {"format_version", kModelFormatVersion}});
  auto files = out.written();
  files.push_back(out.dir() / "target.bin");
  files.push_back(out.dir() / "draft.bin");
  return files;
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"moespec: expert budgeting for speculative decoding in MoE models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::string config_path;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string out_dir, preset, trace;
  std::vector<std::size_t> budgets, tree_sizes;
  std::vector<std::string> methods, policies;
  std::size_t gen_len = 0;

  struct Flag {
    CLI::Option* opt = nullptr;
    bool set() const { return opt && opt->count() > 0; }
  };
  Flag f_config, f_seed, f_workers, f_out, f_preset, f_budget, f_method, f_policy, f_tree, f_gen,
      f_trace;

  f_config.opt = app.add_option("--config", config_path, "JSON experiment config");
  f_seed.opt = app.add_option("--seed", seed, "master seed");
  f_workers.opt = app.add_option("--workers", workers, "parallel workers (results do not depend on it)");
  f_out.opt = app.add_option("--out-dir", out_dir, "output directory");
  f_preset.opt = app.add_option("--preset", preset, "model preset: olmoe-toy | qwen3-toy | mixtral-toy");
  f_budget.opt = app.add_option("--budget", budgets, "expert budget(s)")->delimiter(',');
  f_method.opt = app.add_option("--method", methods, "ranking method(s): static,router,oracle")->delimiter(',');
  f_policy.opt = app.add_option("--policy", policies, "coverage policy(ies): truncation,substitution")->delimiter(',');
  f_tree.opt = app.add_option("--tree-size", tree_sizes, "draft tree size(s), 2^n - 1")->delimiter(',');
  f_gen.opt = app.add_option("--gen-len", gen_len, "tokens to generate per prompt");
  f_trace.opt = app.add_option("--trace", trace, "external routing trace (coverage, coactivation)");

  using Command = std::vector<fs::path> (*)(const ExperimentConfig&);
  const std::vector<std::pair<std::string, std::pair<Command, std::string>>> commands = {
      {"simulate", {cmd_simulate, "tree-size x budget x method x policy sweep"}},
      {"ablate", {cmd_ablate, "method x policy ablation with Pareto table"}},
      {"coverage", {cmd_coverage, "routing-probability coverage curves"}},
      {"coactivation", {cmd_coactivation, "expert co-activation matrices and concentration"}},
      {"reconstruct", {cmd_reconstruct, "teacher-forced reconstruction error by method"}},
      {"calibrate-static", {cmd_calibrate_static, "static ranking from a calibration stream"}},
      {"export-model", {cmd_export_model, "write target and draft weights"}},
  };
  for (const auto& [name, cmd] : commands) app.add_subcommand(name, cmd.second)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    ExperimentConfig cfg;
    if (f_config.set()) cfg = load_config_file(config_path, cfg);
    if (f_preset.set()) {
      cfg.preset = preset;
      cfg.model = ModelConfig::preset(preset);
      if (f_config.set()) {
        // File-level model overrides still apply on top of the CLI preset.
        std::ifstream is(config_path);
        json j = json::parse(is);
        if (j.contains("model")) cfg = apply_config_json(cfg, json{{"model", j.at("model")}});
      }
    }
    if (f_seed.set()) cfg.seed = seed;
    if (f_workers.set()) cfg.workers = workers;
    if (f_out.set()) cfg.out_dir = out_dir;
    if (f_budget.set()) cfg.budgets = budgets;
    if (f_method.set()) {
      cfg.methods.clear();
      for (const auto& s : methods) cfg.methods.push_back(parse_ranking_method(s));
    }
    if (f_policy.set()) {
      cfg.policies.clear();
      for (const auto& s : policies) cfg.policies.push_back(parse_coverage_policy(s));
    }
    if (f_tree.set()) cfg.tree_sizes = tree_sizes;
    if (f_gen.set()) cfg.gen_len = gen_len;
    if (f_trace.set()) cfg.trace_file = trace;

    for (const auto& [name, cmd] : commands) {
      if (!app.got_subcommand(name)) continue;
      auto files = cmd.first(cfg);
      for (const auto& f : files) std::cout << f.string() << '\n';
    }
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "moespec: invalid usage: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "moespec: error: " << e.what() << '\n';
    return 1;
  }
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("moespec");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace moespec
