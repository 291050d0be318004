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

// Batched per-token kernels. The default entry points run the token (or
// expert x token) loop under OpenMP; the serial namespace keeps the plain
// loops as the reference. Each output slot is written by exactly one
// iteration, so both paths are bit-identical for any thread count.

#include <span>
#include <vector>

#include "moespec/moe.hpp"

namespace moespec::kernels {

std::vector<RoutingRecord> route_batch(const MoELayerWeights& layer, std::span<const Vec> inputs);

std::vector<Vec> moe_full_batch(const MoELayerWeights& layer, std::span<const Vec> inputs,
                                std::span<const RoutingRecord> routing);

// outputs[i][t] = E_i(inputs[t]) for every expert i and token t.
std::vector<std::vector<Vec>> expert_outputs_all(const MoELayerWeights& layer,
                                                 std::span<const Vec> inputs);

// out[t] = sum over terms[t] of weight * E_i(inputs[t]).
std::vector<Vec> weighted_sum_batch(const MoELayerWeights& layer, std::span<const Vec> inputs,
                                    std::span<const std::vector<WeightedExpert>> terms);

// Number of worker threads kernels may use. Defaults to 1; inside an
// enclosing parallel region kernels always run serially.
void set_kernel_threads(int threads);
int kernel_threads();

namespace serial {

std::vector<RoutingRecord> route_batch(const MoELayerWeights& layer, std::span<const Vec> inputs);

std::vector<Vec> moe_full_batch(const MoELayerWeights& layer, std::span<const Vec> inputs,
                                std::span<const RoutingRecord> routing);

std::vector<std::vector<Vec>> expert_outputs_all(const MoELayerWeights& layer,
                                                 std::span<const Vec> inputs);

std::vector<Vec> weighted_sum_batch(const MoELayerWeights& layer, std::span<const Vec> inputs,
                                    std::span<const std::vector<WeightedExpert>> terms);

}  // namespace serial
}  // namespace moespec::kernels
