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

#include "moespec/tree.hpp"
#include "moespec/parallel.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

namespace moespec {

std::size_t TreeTopology::node_count() const {
  std::size_t total = 1;
  std::size_t level = 1;
  for (std::size_t b : branching) {
    level *= b;
    total += level;
  }
  return total;
}

TreeTopology TreeTopology::chain(std::size_t depth) { return {std::vector<std::size_t>(depth, 1)}; }

TreeTopology TreeTopology::binary_for_size(std::size_t size) {
  std::size_t depth = 0;
  std::size_t count = 1;
  while (count < size) {
    ++depth;
    count = 2 * count + 1;
  }
  if (count != size) {
    throw UsageError("tree size " + std::to_string(size) +
                     " is not a full binary tree size (2^n - 1)");
  }
  return {std::vector<std::size_t>(depth, 2)};
}

TreeTopology TreeTopology::for_size(std::size_t size) {
  TreeTopology t = binary_for_size(size);
  if (t.depth() <= kDefaultMaxDepth) return t;
  const std::size_t parents = std::size_t{1} << (kDefaultMaxDepth - 1);
  const std::size_t inner = (std::size_t{1} << kDefaultMaxDepth) - 1;
  t.branching.resize(kDefaultMaxDepth);
  t.branching.back() = (size - inner) / parents;
  return t;
}

std::size_t DraftTree::levels() const {
  std::size_t deepest = 0;
  for (const TreeNode& n : nodes) deepest = std::max(deepest, n.depth);
  return nodes.empty() ? 0 : deepest + 1;
}

std::vector<std::size_t> DraftTree::parents() const {
  std::vector<std::size_t> p;
  p.reserve(nodes.size());
  for (const TreeNode& n : nodes) p.push_back(n.parent);
  return p;
}

std::vector<TokenId> DraftTree::tokens() const {
  std::vector<TokenId> t;
  t.reserve(nodes.size());
  for (const TreeNode& n : nodes) t.push_back(n.token);
  return t;
}

void DraftTree::validate() const {
  if (nodes.empty()) throw UsageError("DraftTree: no nodes");
  if (nodes[0].parent != kNoParent || nodes[0].depth != 0) {
    throw UsageError("DraftTree: node 0 must be the root");
  }
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    const TreeNode& n = nodes[i];
    if (n.parent == kNoParent || n.parent >= i) {
      throw UsageError("DraftTree: node " + std::to_string(i) + " has an invalid parent");
    }
    if (n.depth != nodes[n.parent].depth + 1) {
      throw UsageError("DraftTree: node " + std::to_string(i) + " has inconsistent depth");
    }
  }
}

TreeRouting routing_from(const ForwardResult& result) {
  TreeRouting r;
  r.layers.reserve(result.layers.size());
  for (const LayerTrace& tr : result.layers) r.layers.push_back(tr.routing);
  return r;
}

DraftTree build_tree(const MoEModel& draft, const ContextCache& draft_context,
                     const TreeTopology& topology) {
  if (draft_context.size() == 0) throw UsageError("build_tree: empty context");
  for (std::size_t b : topology.branching) {
    if (b < 1 || b > draft.config.vocab) {
      throw UsageError("build_tree: branching " + std::to_string(b) +
                       " must lie in [1, vocab]");
    }
  }
  DraftTree tree;
  tree.topology = topology;
  tree.nodes.push_back({kNoParent, static_cast<TokenId>(argmax(draft_context.last_logits)), 0});

  FullMoeExecutor full;
  std::size_t level_begin = 0;
  for (std::size_t depth = 0; depth < topology.depth(); ++depth) {
    const std::size_t level_end = tree.nodes.size();
    auto tokens = tree.tokens();
    auto parents = tree.parents();
    ForwardResult fr = forward_tree(draft, draft_context, tokens, parents, full);
    for (std::size_t node = level_begin; node < level_end; ++node) {
      for (std::size_t child : top_k_indices(fr.logits[node], topology.branching[depth])) {
        tree.nodes.push_back({node, static_cast<TokenId>(child), depth + 1});
      }
    }
    level_begin = level_end;
  }
  return tree;
}

DraftTree build_tree(const MoEModel& draft, std::span<const TokenId> context,
                     const TreeTopology& topology) {
  if (context.empty()) throw UsageError("build_tree: empty context");
  return build_tree(draft, make_context(draft, context), topology);
}

ForwardResult verify_forward_full(const MoEModel& target, const ContextCache& target_context,
                                  const DraftTree& tree) {
  FullMoeExecutor full;
  return forward_tree(target, target_context, tree.tokens(), tree.parents(), full);
}

std::vector<ExpertId> expert_union(const TreeRouting& routing, std::size_t layer) {
  if (layer >= routing.num_layers()) throw UsageError("expert_union: layer out of range");
  std::vector<char> seen;
  for (const RoutingRecord& rec : routing.layers[layer]) {
    if (seen.size() < rec.probs.size()) seen.resize(rec.probs.size(), 0);
    for (ExpertId e : rec.selected) seen[e] = 1;
  }
  std::vector<ExpertId> out;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i]) out.push_back(i);
  }
  return out;
}

std::vector<TokenId> PromptGenerator::prompt(std::uint64_t index) const {
  Rng rng = Rng(seed, 0x70726f6d7074ULL).substream(index);
  std::vector<TokenId> p(length);
  for (TokenId& t : p) t = static_cast<TokenId>(rng.uniform_index(vocab));
  return p;
}

std::vector<UnionGrowthPoint> union_growth_curve(const MoEModel& target, const MoEModel& draft,
                                                 const PromptGenerator& prompts,
                                                 std::span<const std::size_t> sizes,
                                                 std::size_t trees_per_size, int workers) {
  if (trees_per_size == 0) throw UsageError("union_growth_curve: trees_per_size must be positive");
  const std::size_t layers = target.num_layers();
  const std::size_t n_sizes = sizes.size();
  std::vector<TreeTopology> topo;
  for (std::size_t s : sizes) topo.push_back(TreeTopology::for_size(s));

  // union_sizes[tree][size][layer]
  std::vector<std::vector<std::vector<double>>> union_sizes(
      trees_per_size, std::vector<std::vector<double>>(n_sizes, std::vector<double>(layers)));
  parallel_for(trees_per_size, workers, [&](std::size_t i) {
    auto prompt = prompts.prompt(i);
    ContextCache tctx = make_context(target, prompt);
    ContextCache dctx = make_context(draft, prompt);
    for (std::size_t s = 0; s < n_sizes; ++s) {
      DraftTree tree = build_tree(draft, dctx, topo[s]);
      TreeRouting routing = routing_from(verify_forward_full(target, tctx, tree));
      for (std::size_t l = 0; l < layers; ++l) {
        union_sizes[i][s][l] = static_cast<double>(expert_union(routing, l).size());
      }
    }
  });

  std::vector<UnionGrowthPoint> out;
  for (std::size_t s = 0; s < n_sizes; ++s) {
    UnionGrowthPoint pt;
    pt.tree_size = sizes[s];
    pt.mean_union_per_layer.assign(layers, 0.0);
    for (std::size_t l = 0; l < layers; ++l) {
      double sum = 0.0;
      for (std::size_t i = 0; i < trees_per_size; ++i) sum += union_sizes[i][s][l];
      pt.mean_union_per_layer[l] = sum / static_cast<double>(trees_per_size);
      pt.mean_union += pt.mean_union_per_layer[l];
    }
    pt.mean_union /= static_cast<double>(layers);
    out.push_back(std::move(pt));
  }
  return out;
}

void write_tree_jsonl(const DraftTree& tree, std::ostream& os) {
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const TreeNode& n = tree.nodes[i];
    nlohmann::ordered_json j = {
        {"index", i},
        {"parent", n.parent == kNoParent ? -1 : static_cast<long long>(n.parent)},
        {"token", n.token},
        {"depth", n.depth},
    };
    os << j.dump() << '\n';
  }
}

DraftTree read_tree_jsonl(std::istream& is) {
  DraftTree tree;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.at("index").get<std::size_t>() != tree.nodes.size()) {
      throw UsageError("read_tree_jsonl: nodes must appear in index order");
    }
    long long parent = j.at("parent").get<long long>();
    tree.nodes.push_back({parent < 0 ? kNoParent : static_cast<std::size_t>(parent),
                          j.at("token").get<TokenId>(), j.at("depth").get<std::size_t>()});
  }
  tree.validate();
  return tree;
}

}  // namespace moespec
