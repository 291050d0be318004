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

// Times the OpenMP kernels against their serial references and checks that
// both produce identical results.
//
//   moespec_bench [--threads N] [--tokens M] [--reps R] [--sweep]

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "moespec/kernels.hpp"
#include "moespec/model.hpp"
#include "moespec/simulator.hpp"
#include "moespec/tree.hpp"

using namespace moespec;

namespace {

double best_ms(int reps, const std::function<void()>& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

void row(const char* name, double serial, double parallel, bool same) {
  std::printf("%-22s %10.3f %10.3f %8.2fx  %s\n", name, serial, parallel, serial / parallel,
              same ? "identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moespec kernel benchmark"};
  int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::size_t tokens = 63;
  int reps = 5;
  bool run_sweep = false;
  app.add_option("--threads", threads, "OpenMP threads for the parallel path");
  app.add_option("--tokens", tokens, "tokens per batch");
  app.add_option("--reps", reps, "repetitions; the best time is reported");
  app.add_flag("--sweep", run_sweep, "also time a small sweep at 1 and N workers");
  CLI11_PARSE(app, argc, argv);

  const ModelConfig cfg;
  const MoEModel model = build_target(cfg);
  const MoELayerWeights& layer = model.blocks.front().moe;
  Rng rng(1, 2);
  std::vector<Vec> inputs(tokens, Vec(cfg.d));
  for (Vec& h : inputs)
    for (double& v : h) v = rng.normal();
  const auto routing = kernels::serial::route_batch(layer, inputs);
  std::vector<std::vector<WeightedExpert>> terms;
  for (const RoutingRecord& r : routing) terms.push_back(mixing_weights(r, r.selected, layer.renormalize));

  std::printf("N=%zu k=%zu d=%zu tokens=%zu threads=%d\n", cfg.num_experts, cfg.top_k, cfg.d,
              tokens, threads);
  std::printf("%-22s %10s %10s %9s\n", "kernel", "serial ms", "omp ms", "speedup");

  kernels::set_kernel_threads(threads);
  {
    std::vector<RoutingRecord> a, b;
    double s = best_ms(reps, [&] { a = kernels::serial::route_batch(layer, inputs); });
    double p = best_ms(reps, [&] { b = kernels::route_batch(layer, inputs); });
    row("route_batch", s, p, a == b);
  }
  {
    std::vector<Vec> a, b;
    double s = best_ms(reps, [&] { a = kernels::serial::moe_full_batch(layer, inputs, routing); });
    double p = best_ms(reps, [&] { b = kernels::moe_full_batch(layer, inputs, routing); });
    row("moe_full_batch", s, p, a == b);
  }
  {
    std::vector<std::vector<Vec>> a, b;
    double s = best_ms(reps, [&] { a = kernels::serial::expert_outputs_all(layer, inputs); });
    double p = best_ms(reps, [&] { b = kernels::expert_outputs_all(layer, inputs); });
    row("expert_outputs_all", s, p, a == b);
  }
  {
    std::vector<Vec> a, b;
    double s = best_ms(reps, [&] { a = kernels::serial::weighted_sum_batch(layer, inputs, terms); });
    double p = best_ms(reps, [&] { b = kernels::weighted_sum_batch(layer, inputs, terms); });
    row("weighted_sum_batch", s, p, a == b);
  }
  kernels::set_kernel_threads(1);

  if (run_sweep) {
    Rng drng(0, 0xd4af7);
    const MoEModel draft = derive_draft(model, DraftSpec{}, drng);
    SweepSpec spec;
    spec.tree_sizes = {31, 63};
    spec.budgets = {16, 32};
    spec.methods = {RankingMethod::Router, RankingMethod::Oracle};
    spec.policies = {CoveragePolicy::Substitution};
    spec.seeds = {1, 2};
    spec.gen_len = 32;
    SweepResult a, b;
    double s = best_ms(1, [&] { a = sweep(model, draft, spec, nullptr, 1); });
    double p = best_ms(1, [&] { b = sweep(model, draft, spec, nullptr, threads); });
    bool same = a.rows.size() == b.rows.size();
    for (std::size_t i = 0; same && i < a.rows.size(); ++i)
      same = a.rows[i].speedup == b.rows[i].speedup && a.rows[i].quality == b.rows[i].quality;
    row("sweep (cells)", s, p, same);
  }
  return 0;
}
