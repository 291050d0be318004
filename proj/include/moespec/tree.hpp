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
#include <span>
#include <vector>

#include "moespec/model.hpp"

namespace moespec {

// Static tree shape: a single root, then every node at depth i gets
// branching[i] children. Node count is 1 + b0 + b0*b1 + ...
struct TreeTopology {
  std::vector<std::size_t> branching;

  std::size_t depth() const { return branching.size(); }
  std::size_t node_count() const;

  static TreeTopology chain(std::size_t depth);
  // Full binary tree with `size` nodes; size must be 2^(D+1) - 1.
  static TreeTopology binary_for_size(std::size_t size);
  // Default family for a size-(2^n - 1) tree: full binary up to
  // kDefaultMaxDepth levels below the root, after which extra nodes widen the
  // deepest level (127 -> {2,2,2,2,6}, 255 -> {2,2,2,2,14}).
  static TreeTopology for_size(std::size_t size);
  static constexpr std::size_t kDefaultMaxDepth = 5;

  bool operator==(const TreeTopology&) const = default;
};

struct TreeNode {
  std::size_t parent = kNoParent;
  TokenId token = 0;
  std::size_t depth = 0;

  bool operator==(const TreeNode&) const = default;
};

struct DraftTree {
  std::vector<TreeNode> nodes;  // topological order, nodes[0] is the root
  TreeTopology topology;

  std::size_t size() const { return nodes.size(); }
  std::size_t levels() const;
  std::vector<std::size_t> parents() const;
  std::vector<TokenId> tokens() const;
  void validate() const;

  bool operator==(const DraftTree&) const = default;
};

// Natural routing of every tree node, per MoE layer.
struct TreeRouting {
  std::vector<std::vector<RoutingRecord>> layers;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t num_tokens() const { return layers.empty() ? 0 : layers.front().size(); }
};

TreeRouting routing_from(const ForwardResult& result);

/// Breadth-first expansion: the root is the draft's greedy token after the
/// context, and each node's children are its top-b draft tokens under tree
/// attention.
DraftTree build_tree(const MoEModel& draft, const ContextCache& draft_context,
                     const TreeTopology& topology);
DraftTree build_tree(const MoEModel& draft, std::span<const TokenId> context,
                     const TreeTopology& topology);

/// Unbudgeted target pass over the tree.
ForwardResult verify_forward_full(const MoEModel& target, const ContextCache& target_context,
                                  const DraftTree& tree);

// Union of every node's top-k at one layer, ascending.
std::vector<ExpertId> expert_union(const TreeRouting& routing, std::size_t layer);

/// Seeded random prompts; prompt i is independent of every other index.
struct PromptGenerator {
  std::uint64_t seed = 0;
  std::size_t length = 16;
  std::size_t vocab = 256;

  std::vector<TokenId> prompt(std::uint64_t index) const;
};

struct UnionGrowthPoint {
  std::size_t tree_size = 0;
  std::vector<double> mean_union_per_layer;
  double mean_union = 0.0;  // averaged over layers
};

/// Mean |expert union| per layer over `trees_per_size` seeded trees for each
/// (full binary) tree size.
std::vector<UnionGrowthPoint> union_growth_curve(const MoEModel& target, const MoEModel& draft,
                                                 const PromptGenerator& prompts,
                                                 std::span<const std::size_t> sizes,
                                                 std::size_t trees_per_size, int workers = 1);

// One JSON object per node: {"index","parent","token","depth"}; the root's
// parent is -1.
void write_tree_jsonl(const DraftTree& tree, std::ostream& os);
DraftTree read_tree_jsonl(std::istream& is);

}  // namespace moespec
