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
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moespec/moe.hpp"
#include "moespec/numerics.hpp"

namespace moespec {

struct ModelConfig {
  std::size_t d = 32;
  std::size_t d_ff = 64;
  std::size_t num_experts = 64;
  std::size_t top_k = 8;
  std::size_t num_layers = 4;
  std::size_t vocab = 256;
  bool renormalize = true;
  double skew = 1.0;  // router-bias concentration; 0 gives exchangeable experts
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  // Named presets: "olmoe-toy" (N=64, k=8), "qwen3-toy" (N=128, k=8, raw
  // mixing weights), "mixtral-toy" (N=8, k=2).
  static ModelConfig preset(const std::string& name);
  static std::vector<std::string> preset_names();
};

struct AttentionWeights {
  Mat wq, wk, wv, wo;  // each d x d
  bool operator==(const AttentionWeights&) const = default;
};

struct Block {
  AttentionWeights attn;
  MoELayerWeights moe;
  bool operator==(const Block&) const = default;
};

struct MoEModel {
  ModelConfig config;
  Mat embedding;  // V x d
  std::vector<Block> blocks;
  Mat head;  // V x d

  std::size_t num_layers() const { return blocks.size(); }
  bool operator==(const MoEModel&) const = default;
};

struct DraftSpec {
  double noise_std = 0.05;  // relative to each matrix's own entry std
  std::optional<std::size_t> layers_kept;  // defaults to every target layer
};

/// Router for one layer: Gaussian rows scaled by 1/sqrt(d) plus a bias
/// skew * log(1 / (rank + 1)) where rank is a seeded random permutation of
/// the experts.
RouterWeights build_router(std::size_t d, std::size_t num_experts, double skew, Rng& rng);

MoEModel build_target(const ModelConfig& config);
MoEModel derive_draft(const MoEModel& target, const DraftSpec& spec, Rng& rng);

inline constexpr std::size_t kNoParent = std::numeric_limits<std::size_t>::max();

// Per-layer activations for a batch of positions.
struct LayerTrace {
  std::vector<Vec> moe_inputs;  // normalized residual fed to router and experts
  std::vector<RoutingRecord> routing;
  std::vector<Vec> keys;
  std::vector<Vec> values;
  std::vector<Vec> hidden;  // residual stream after the block
};

struct ForwardResult {
  std::vector<LayerTrace> layers;
  std::vector<Vec> logits;
};

/// Computes MoE sublayer outputs for a whole batch at one layer. The router
/// has already run; `routing[t]` is the natural routing of `inputs[t]`.
class MoeExecutor {
 public:
  virtual ~MoeExecutor() = default;
  virtual void run(std::size_t layer, const MoELayerWeights& weights, std::span<const Vec> inputs,
                   std::span<const RoutingRecord> routing, std::span<Vec> outputs) = 0;
};

class FullMoeExecutor final : public MoeExecutor {
 public:
  void run(std::size_t layer, const MoELayerWeights& weights, std::span<const Vec> inputs,
           std::span<const RoutingRecord> routing, std::span<Vec> outputs) override;
};

// Key/value history of committed positions, one entry per layer.
struct ContextCache {
  std::vector<TokenId> tokens;
  std::vector<std::vector<Vec>> keys;
  std::vector<std::vector<Vec>> values;
  Vec last_logits;  // logits at the final committed position

  std::size_t size() const { return tokens.size(); }
};

// mask(i, j) == true when position i may attend to position j.
class AttentionMask {
 public:
  explicit AttentionMask(std::size_t n) : n_(n), allowed_(n * n, 0) {}
  static AttentionMask causal(std::size_t n);
  // Each node sees itself and its ancestors. parents[i] < i or kNoParent.
  static AttentionMask tree(std::span<const std::size_t> parents);

  std::size_t size() const { return n_; }
  bool operator()(std::size_t i, std::size_t j) const { return allowed_[i * n_ + j] != 0; }
  void allow(std::size_t i, std::size_t j) { allowed_[i * n_ + j] = 1; }

 private:
  std::size_t n_;
  std::vector<char> allowed_;
};

/// Uncached forward over a token sequence with an arbitrary attention mask.
/// Pre-norm blocks: h += attn(norm(h)); h += MoE(norm(h)); logits = head * norm(h).
ForwardResult forward(const MoEModel& model, std::span<const TokenId> tokens,
                      const AttentionMask& mask);
ForwardResult forward(const MoEModel& model, std::span<const TokenId> tokens,
                      const AttentionMask& mask, MoeExecutor& executor);

ContextCache make_context(const MoEModel& model, std::span<const TokenId> prompt);

/// Appends tokens causally to the cache with the unbudgeted MoE.
ForwardResult extend_context(const MoEModel& model, ContextCache& cache,
                             std::span<const TokenId> tokens);

/// Forward over tree nodes placed after the cached context. Node t attends to
/// every context position and then to its ancestors root-first, the same key
/// order a causal pass over that path would use.
ForwardResult forward_tree(const MoEModel& model, const ContextCache& cache,
                           std::span<const TokenId> tokens, std::span<const std::size_t> parents,
                           MoeExecutor& executor);

// Binary format: "MOESPEC\0", u32 version, u32 header length, JSON header
// (config plus layer count), then every matrix as little-endian f64 in a
// fixed order (embedding, per layer wq wk wv wo router bias experts, head).
void save_model(const MoEModel& model, const std::filesystem::path& path);
MoEModel load_model(const std::filesystem::path& path);

inline constexpr std::uint32_t kModelFormatVersion = 1;

}  // namespace moespec
