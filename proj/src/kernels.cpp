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

#include "moespec/kernels.hpp"

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace moespec::kernels {
namespace {

std::atomic<int> g_threads{1};

bool run_parallel(std::size_t work_items) {
#ifdef _OPENMP
  return g_threads.load() > 1 && work_items > 1 && !omp_in_parallel();
#else
  (void)work_items;
  return false;
#endif
}

}  // namespace

void set_kernel_threads(int threads) { g_threads.store(threads < 1 ? 1 : threads); }
int kernel_threads() { return g_threads.load(); }

std::vector<RoutingRecord> route_batch(const MoELayerWeights& layer, std::span<const Vec> inputs) {
  std::vector<RoutingRecord> out(inputs.size());
  const auto n = static_cast<std::ptrdiff_t>(inputs.size());
  [[maybe_unused]] const bool par = run_parallel(inputs.size());
#pragma omp parallel for schedule(static) if (par) num_threads(kernel_threads())
  for (std::ptrdiff_t t = 0; t < n; ++t) out[t] = route(layer, inputs[t]);
  return out;
}

std::vector<Vec> moe_full_batch(const MoELayerWeights& layer, std::span<const Vec> inputs,
                                std::span<const RoutingRecord> routing) {
  std::vector<Vec> out(inputs.size());
  const auto n = static_cast<std::ptrdiff_t>(inputs.size());
  [[maybe_unused]] const bool par = run_parallel(inputs.size());
#pragma omp parallel for schedule(static) if (par) num_threads(kernel_threads())
  for (std::ptrdiff_t t = 0; t < n; ++t) out[t] = moe_forward_full(layer, inputs[t], routing[t]);
  return out;
}

std::vector<std::vector<Vec>> expert_outputs_all(const MoELayerWeights& layer,
                                                 std::span<const Vec> inputs) {
  const std::size_t n_exp = layer.num_experts();
  const std::size_t m = inputs.size();
  std::vector<std::vector<Vec>> out(n_exp, std::vector<Vec>(m));
  const auto total = static_cast<std::ptrdiff_t>(n_exp * m);
  [[maybe_unused]] const bool par = run_parallel(n_exp * m);
#pragma omp parallel for schedule(static) if (par) num_threads(kernel_threads())
  for (std::ptrdiff_t idx = 0; idx < total; ++idx) {
    const auto i = static_cast<std::size_t>(idx) / m;
    const auto t = static_cast<std::size_t>(idx) % m;
    out[i][t] = layer.experts[i].forward(inputs[t]);
  }
  return out;
}

std::vector<Vec> weighted_sum_batch(const MoELayerWeights& layer, std::span<const Vec> inputs,
                                    std::span<const std::vector<WeightedExpert>> terms) {
  std::vector<Vec> out(inputs.size());
  const auto n = static_cast<std::ptrdiff_t>(inputs.size());
  [[maybe_unused]] const bool par = run_parallel(inputs.size());
#pragma omp parallel for schedule(static) if (par) num_threads(kernel_threads())
  for (std::ptrdiff_t t = 0; t < n; ++t) out[t] = weighted_expert_sum(layer, inputs[t], terms[t]);
  return out;
}

namespace serial {

std::vector<RoutingRecord> route_batch(const MoELayerWeights& layer, std::span<const Vec> inputs) {
  std::vector<RoutingRecord> out;
  out.reserve(inputs.size());
  for (const Vec& h : inputs) out.push_back(route(layer, h));
  return out;
}

std::vector<Vec> moe_full_batch(const MoELayerWeights& layer, std::span<const Vec> inputs,
                                std::span<const RoutingRecord> routing) {
  std::vector<Vec> out;
  out.reserve(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    out.push_back(moe_forward_full(layer, inputs[t], routing[t]));
  }
  return out;
}

std::vector<std::vector<Vec>> expert_outputs_all(const MoELayerWeights& layer,
                                                 std::span<const Vec> inputs) {
  std::vector<std::vector<Vec>> out(layer.num_experts());
  for (std::size_t i = 0; i < layer.num_experts(); ++i) {
    for (const Vec& h : inputs) out[i].push_back(layer.experts[i].forward(h));
  }
  return out;
}

std::vector<Vec> weighted_sum_batch(const MoELayerWeights& layer, std::span<const Vec> inputs,
                                    std::span<const std::vector<WeightedExpert>> terms) {
  std::vector<Vec> out;
  out.reserve(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    out.push_back(weighted_expert_sum(layer, inputs[t], terms[t]));
  }
  return out;
}

}  // namespace serial
}  // namespace moespec::kernels
