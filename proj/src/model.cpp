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

#include "moespec/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "moespec/kernels.hpp"

namespace moespec {

void ModelConfig::validate() const {
  if (d == 0 || d_ff == 0) throw UsageError("ModelConfig: d and d_ff must be positive");
  if (num_experts == 0) throw UsageError("ModelConfig: num_experts must be positive");
  if (top_k < 1 || top_k > num_experts) {
    throw UsageError("ModelConfig: top_k must satisfy 1 <= k <= N (k=" + std::to_string(top_k) +
                     ", N=" + std::to_string(num_experts) + ")");
  }
  if (num_layers < 1) throw UsageError("ModelConfig: num_layers must be >= 1");
  if (vocab < 2) throw UsageError("ModelConfig: vocab must be >= 2");
  if (!(skew >= 0.0) || !std::isfinite(skew)) throw UsageError("ModelConfig: skew must be >= 0");
}

std::vector<std::string> ModelConfig::preset_names() {
  return {"olmoe-toy", "qwen3-toy", "mixtral-toy"};
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "olmoe-toy") {
    c.num_experts = 64;
    c.top_k = 8;
    c.renormalize = true;
  } else if (name == "qwen3-toy") {
    c.num_experts = 128;
    c.top_k = 8;
    c.renormalize = false;
  } else if (name == "mixtral-toy") {
    c.num_experts = 8;
    c.top_k = 2;
    c.renormalize = true;
  } else {
    throw UsageError("unknown model preset '" + name + "'");
  }
  return c;
}

RouterWeights build_router(std::size_t d, std::size_t num_experts, double skew, Rng& rng) {
  RouterWeights r;
  Rng wrng = rng.substream(0);
  r.w = random_normal(num_experts, d, 1.0 / std::sqrt(static_cast<double>(d)), wrng);
  std::vector<std::size_t> rank(num_experts);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  Rng prng = rng.substream(1);
  prng.shuffle(rank);
  r.bias.assign(num_experts, 0.0);
  for (std::size_t i = 0; i < num_experts; ++i) {
    r.bias[i] = skew * std::log(1.0 / static_cast<double>(rank[i] + 1));
  }
  return r;
}

MoEModel build_target(const ModelConfig& config) {
  config.validate();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(config.d));
  const double inv_sqrt_ff = 1.0 / std::sqrt(static_cast<double>(config.d_ff));
  Rng root(config.seed);

  MoEModel m;
  m.config = config;
  Rng erng = root.substream(0);
  m.embedding = random_normal(config.vocab, config.d, 1.0, erng);
  Rng hrng = root.substream(1);
  m.head = random_normal(config.vocab, config.d, inv_sqrt_d, hrng);

  for (std::size_t l = 0; l < config.num_layers; ++l) {
    Rng lrng = root.substream(100 + l);
    Block b;
    Rng a0 = lrng.substream(0), a1 = lrng.substream(1), a2 = lrng.substream(2),
        a3 = lrng.substream(3);
    b.attn.wq = random_normal(config.d, config.d, inv_sqrt_d, a0);
    b.attn.wk = random_normal(config.d, config.d, inv_sqrt_d, a1);
    b.attn.wv = random_normal(config.d, config.d, inv_sqrt_d, a2);
    b.attn.wo = random_normal(config.d, config.d, inv_sqrt_d, a3);
    Rng rrng = lrng.substream(4);
    b.moe.router = build_router(config.d, config.num_experts, config.skew, rrng);
    b.moe.top_k = config.top_k;
    b.moe.renormalize = config.renormalize;
    b.moe.experts.reserve(config.num_experts);
    for (std::size_t i = 0; i < config.num_experts; ++i) {
      Rng xrng = lrng.substream(1000 + i);
      Expert e;
      e.w_in = random_normal(config.d_ff, config.d, inv_sqrt_d, xrng);
      e.w_out = random_normal(config.d, config.d_ff, inv_sqrt_ff, xrng);
      b.moe.experts.push_back(std::move(e));
    }
    m.blocks.push_back(std::move(b));
  }
  return m;
}

namespace {

double entry_std(const Vec& v) {
  if (v.empty()) return 0.0;
  double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

void perturb(Mat& m, double rel_std, Rng rng) {
  const double s = rel_std * entry_std(m.values);
  if (s == 0.0) return;
  for (double& v : m.values) v += s * rng.normal();
}

}  // namespace

MoEModel derive_draft(const MoEModel& target, const DraftSpec& spec, Rng& rng) {
  const std::size_t keep = spec.layers_kept.value_or(target.num_layers());
  if (keep < 1 || keep > target.num_layers()) {
    throw UsageError("DraftSpec: layers_kept must lie in [1, L]");
  }
  if (!(spec.noise_std >= 0.0)) throw UsageError("DraftSpec: noise_std must be >= 0");

  MoEModel draft;
  draft.config = target.config;
  draft.config.num_layers = keep;
  draft.embedding = target.embedding;
  draft.head = target.head;
  draft.blocks.assign(target.blocks.begin(),
                      target.blocks.begin() + static_cast<std::ptrdiff_t>(keep));

  perturb(draft.embedding, spec.noise_std, rng.substream(0));
  for (std::size_t l = 0; l < keep; ++l) {
    Rng lrng = rng.substream(100 + l);
    Block& b = draft.blocks[l];
    perturb(b.attn.wq, spec.noise_std, lrng.substream(0));
    perturb(b.attn.wk, spec.noise_std, lrng.substream(1));
    perturb(b.attn.wv, spec.noise_std, lrng.substream(2));
    perturb(b.attn.wo, spec.noise_std, lrng.substream(3));
    perturb(b.moe.router.w, spec.noise_std, lrng.substream(4));
    for (std::size_t i = 0; i < b.moe.experts.size(); ++i) {
      perturb(b.moe.experts[i].w_in, spec.noise_std, lrng.substream(1000 + 2 * i));
      perturb(b.moe.experts[i].w_out, spec.noise_std, lrng.substream(1001 + 2 * i));
    }
  }
  return draft;
}

void FullMoeExecutor::run(std::size_t, const MoELayerWeights& weights, std::span<const Vec> inputs,
                          std::span<const RoutingRecord> routing, std::span<Vec> outputs) {
  auto out = kernels::moe_full_batch(weights, inputs, routing);
  std::move(out.begin(), out.end(), outputs.begin());
}

namespace {

void check_parents(std::span<const std::size_t> parents) {
  for (std::size_t i = 0; i < parents.size(); ++i) {
    if (parents[i] != kNoParent && parents[i] >= i) {
      throw UsageError("tree parents must precede their children (node " + std::to_string(i) + ")");
    }
  }
}

}  // namespace

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.allow(i, j);
  return m;
}

AttentionMask AttentionMask::tree(std::span<const std::size_t> parents) {
  check_parents(parents);
  AttentionMask m(parents.size());
  for (std::size_t i = 0; i < parents.size(); ++i) {
    for (std::size_t a = i; a != kNoParent; a = parents[a]) m.allow(i, a);
  }
  return m;
}

namespace {

// visible[t]: batch positions node t attends to, ascending, including t.
ForwardResult forward_core(const MoEModel& model, const ContextCache* cache,
                           std::span<const TokenId> tokens,
                           const std::vector<std::vector<std::size_t>>& visible,
                           MoeExecutor& executor) {
  const std::size_t m = tokens.size();
  const std::size_t d = model.config.d;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (TokenId tok : tokens) {
    if (tok >= model.config.vocab) {
      throw UsageError("forward: token " + std::to_string(tok) + " outside vocabulary of " +
                       std::to_string(model.config.vocab));
    }
  }

  std::vector<Vec> h(m);
  for (std::size_t t = 0; t < m; ++t) {
    auto row = model.embedding.row(tokens[t]);
    h[t].assign(row.begin(), row.end());
  }

  ForwardResult res;
  res.layers.resize(model.num_layers());
  const std::size_t n_ctx = cache ? cache->size() : 0;

  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const Block& blk = model.blocks[l];
    LayerTrace& tr = res.layers[l];
    std::vector<Vec> q(m);
    tr.keys.resize(m);
    tr.values.resize(m);
    for (std::size_t t = 0; t < m; ++t) {
      Vec x = rms_norm(h[t]);
      q[t] = matvec(blk.attn.wq, x);
      tr.keys[t] = matvec(blk.attn.wk, x);
      tr.values[t] = matvec(blk.attn.wv, x);
    }
    for (std::size_t t = 0; t < m; ++t) {
      Vec scores;
      scores.reserve(n_ctx + visible[t].size());
      for (std::size_t j = 0; j < n_ctx; ++j) scores.push_back(scale * dot(q[t], cache->keys[l][j]));
      for (std::size_t j : visible[t]) scores.push_back(scale * dot(q[t], tr.keys[j]));
      Vec p = softmax(scores);
      Vec mixed(d, 0.0);
      for (std::size_t j = 0; j < n_ctx; ++j) axpy(p[j], cache->values[l][j], mixed);
      for (std::size_t a = 0; a < visible[t].size(); ++a) {
        axpy(p[n_ctx + a], tr.values[visible[t][a]], mixed);
      }
      Vec attn_out = matvec(blk.attn.wo, mixed);
      axpy(1.0, attn_out, h[t]);
    }
    tr.moe_inputs.resize(m);
    for (std::size_t t = 0; t < m; ++t) tr.moe_inputs[t] = rms_norm(h[t]);
    tr.routing = kernels::route_batch(blk.moe, tr.moe_inputs);
    std::vector<Vec> moe_out(m);
    executor.run(l, blk.moe, tr.moe_inputs, tr.routing, moe_out);
    for (std::size_t t = 0; t < m; ++t) axpy(1.0, moe_out[t], h[t]);
    tr.hidden = h;
  }

  res.logits.resize(m);
  for (std::size_t t = 0; t < m; ++t) res.logits[t] = matvec(model.head, rms_norm(h[t]));
  return res;
}

std::vector<std::vector<std::size_t>> chain_visibility(std::size_t m) {
  std::vector<std::vector<std::size_t>> vis(m);
  for (std::size_t t = 0; t < m; ++t) {
    vis[t].resize(t + 1);
    std::iota(vis[t].begin(), vis[t].end(), std::size_t{0});
  }
  return vis;
}

}  // namespace

ForwardResult forward(const MoEModel& model, std::span<const TokenId> tokens,
                      const AttentionMask& mask) {
  FullMoeExecutor full;
  return forward(model, tokens, mask, full);
}

ForwardResult forward(const MoEModel& model, std::span<const TokenId> tokens,
                      const AttentionMask& mask, MoeExecutor& executor) {
  if (mask.size() != tokens.size()) throw UsageError("forward: mask size != token count");
  std::vector<std::vector<std::size_t>> vis(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      if (mask(i, j)) vis[i].push_back(j);
    }
    if (vis[i].empty()) throw UsageError("forward: position with empty attention mask");
  }
  return forward_core(model, nullptr, tokens, vis, executor);
}

ContextCache make_context(const MoEModel& model, std::span<const TokenId> prompt) {
  ContextCache cache;
  cache.keys.resize(model.num_layers());
  cache.values.resize(model.num_layers());
  if (prompt.empty()) throw UsageError("make_context: empty prompt");
  extend_context(model, cache, prompt);
  return cache;
}

ForwardResult extend_context(const MoEModel& model, ContextCache& cache,
                             std::span<const TokenId> tokens) {
  FullMoeExecutor full;
  if (cache.keys.size() != model.num_layers()) {
    cache.keys.resize(model.num_layers());
    cache.values.resize(model.num_layers());
  }
  ForwardResult res = forward_core(model, &cache, tokens, chain_visibility(tokens.size()), full);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    auto& tr = res.layers[l];
    cache.keys[l].insert(cache.keys[l].end(), tr.keys.begin(), tr.keys.end());
    cache.values[l].insert(cache.values[l].end(), tr.values.begin(), tr.values.end());
  }
  cache.tokens.insert(cache.tokens.end(), tokens.begin(), tokens.end());
  if (!res.logits.empty()) cache.last_logits = res.logits.back();
  return res;
}

ForwardResult forward_tree(const MoEModel& model, const ContextCache& cache,
                           std::span<const TokenId> tokens, std::span<const std::size_t> parents,
                           MoeExecutor& executor) {
  if (parents.size() != tokens.size()) throw UsageError("forward_tree: parents/tokens size mismatch");
  check_parents(parents);
  std::vector<std::vector<std::size_t>> vis(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t a = i; a != kNoParent; a = parents[a]) vis[i].push_back(a);
    std::reverse(vis[i].begin(), vis[i].end());
  }
  return forward_core(model, &cache, tokens, vis, executor);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "model files are little-endian; add byte swapping for this host");

constexpr char kMagic[8] = {'M', 'O', 'E', 'S', 'P', 'E', 'C', '\0'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void write_vec(std::ostream& os, const Vec& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_vec(std::istream& is, Vec& v) {
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!is) throw UsageError("load_model: truncated weight data");
}

template <typename Fn>
void visit_tensors(MoEModel& m, Fn&& fn) {
  fn(m.embedding.values);
  for (Block& b : m.blocks) {
    fn(b.attn.wq.values);
    fn(b.attn.wk.values);
    fn(b.attn.wv.values);
    fn(b.attn.wo.values);
    fn(b.moe.router.w.values);
    fn(b.moe.router.bias);
    for (Expert& e : b.moe.experts) {
      fn(e.w_in.values);
      fn(e.w_out.values);
    }
  }
  fn(m.head.values);
}

}  // namespace

void save_model(const MoEModel& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("save_model: cannot open " + path.string());
  const ModelConfig& c = model.config;
  nlohmann::ordered_json header = {
      {"format", "moespec-model"},
      {"d", c.d},
      {"d_ff", c.d_ff},
      {"num_experts", c.num_experts},
      {"top_k", c.top_k},
      {"num_layers", model.num_layers()},
      {"vocab", c.vocab},
      {"renormalize", c.renormalize},
      {"skew", c.skew},
      {"seed", c.seed},
  };
  std::string text = header.dump();
  os.write(kMagic, sizeof kMagic);
  write_u32(os, kModelFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  visit_tensors(const_cast<MoEModel&>(model), [&](Vec& v) { write_vec(os, v); });
  if (!os) throw UsageError("save_model: write failed for " + path.string());
}

MoEModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("load_model: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw UsageError("load_model: " + path.string() + " is not a moespec model file");
  }
  std::uint32_t version = read_u32(is);
  if (version != kModelFormatVersion) {
    throw UsageError("load_model: unsupported format version " + std::to_string(version));
  }
  std::uint32_t len = read_u32(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  auto header = nlohmann::json::parse(text);

  ModelConfig c;
  c.d = header.at("d");
  c.d_ff = header.at("d_ff");
  c.num_experts = header.at("num_experts");
  c.top_k = header.at("top_k");
  c.num_layers = header.at("num_layers");
  c.vocab = header.at("vocab");
  c.renormalize = header.at("renormalize");
  c.skew = header.at("skew");
  c.seed = header.at("seed");
  c.validate();

  MoEModel m;
  m.config = c;
  m.embedding = Mat(c.vocab, c.d);
  m.head = Mat(c.vocab, c.d);
  m.blocks.resize(c.num_layers);
  for (Block& b : m.blocks) {
    b.attn.wq = Mat(c.d, c.d);
    b.attn.wk = Mat(c.d, c.d);
    b.attn.wv = Mat(c.d, c.d);
    b.attn.wo = Mat(c.d, c.d);
    b.moe.router.w = Mat(c.num_experts, c.d);
    b.moe.router.bias.assign(c.num_experts, 0.0);
    b.moe.top_k = c.top_k;
    b.moe.renormalize = c.renormalize;
    b.moe.experts.assign(c.num_experts, Expert{Mat(c.d_ff, c.d), Mat(c.d, c.d_ff)});
  }
  visit_tensors(m, [&](Vec& v) { read_vec(is, v); });
  return m;
}

}  // namespace moespec
