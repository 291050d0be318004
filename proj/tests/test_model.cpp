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

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "moespec/analysis.hpp"
#include "moespec/model.hpp"
#include "test_support.hpp"

using namespace moespec;
using namespace moespec::testing;

namespace {

ModelConfig small_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.d = 8;
  c.d_ff = 12;
  c.num_experts = 8;
  c.top_k = 2;
  c.num_layers = 2;
  c.vocab = 32;
  c.seed = seed;
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.uniform_index(vocab));
  return t;
}

double matrix_std(const Mat& m) {
  double mean = 0.0, ss = 0.0;
  for (double v : m.values) mean += v;
  mean /= double(m.values.size());
  for (double v : m.values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / double(m.values.size()));
}

}  // namespace

TEST_CASE("config validation and presets") {
  CHECK_NOTHROW(ModelConfig{}.validate());
  ModelConfig c;
  c.top_k = c.num_experts + 1;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = ModelConfig{};
  c.vocab = 1;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = ModelConfig{};
  c.num_layers = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  CHECK(ModelConfig::preset("olmoe-toy").num_experts == 64);
  CHECK(ModelConfig::preset("olmoe-toy").top_k == 8);
  CHECK(ModelConfig::preset("qwen3-toy").num_experts == 128);
  CHECK_FALSE(ModelConfig::preset("qwen3-toy").renormalize);
  CHECK(ModelConfig::preset("mixtral-toy").num_experts == 8);
  CHECK(ModelConfig::preset("mixtral-toy").top_k == 2);
  CHECK_THROWS_AS(ModelConfig::preset("gpt"), UsageError);
}

TEST_CASE("same seed builds identical models") {
  CHECK(build_target(small_config(5)) == build_target(small_config(5)));
  CHECK_FALSE(build_target(small_config(5)) == build_target(small_config(6)));
}

TEST_CASE("router with skew 0 selects experts uniformly over router draws") {
  // Each token gets a freshly drawn router, so every expert is selected with
  // probability k/N and the per-expert count is Binomial(T, k/N).
  const std::size_t d = 8, n = 16, k = 2, tokens = 10000;
  std::vector<int> counts(n, 0);
  Rng root(77);
  MoELayerWeights layer;
  layer.experts.resize(n);
  layer.top_k = k;
  for (std::size_t t = 0; t < tokens; ++t) {
    Rng rr = root.substream(t);
    layer.router = build_router(d, n, 0.0, rr);
    auto rec = route(layer, random_vec(d, rr));
    for (ExpertId e : rec.selected) ++counts[e];
  }
  const double p = double(k) / double(n);
  const double mean = tokens * p, sigma = std::sqrt(tokens * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - mean) <= 3.0 * sigma);
}

TEST_CASE("larger skew concentrates routing") {
  double cov0 = 0.0, cov2 = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (double skew : {0.0, 2.0}) {
      ModelConfig c;
      c.seed = seed;
      c.skew = skew;
      c.num_layers = 1;
      auto m = build_target(c);
      Rng rng(seed, 99);
      auto fr = forward(m, random_tokens(63, c.vocab, rng), AttentionMask::causal(63));
      double v = coverage_curve(fr.layers[0].routing)[c.num_experts / 2 - 1];
      (skew == 0.0 ? cov0 : cov2) += v / 10.0;
    }
  }
  CHECK(cov2 > cov0);
}

TEST_CASE("noise-free draft equals the target") {
  auto target = build_target(small_config());
  Rng rng(1);
  CHECK(derive_draft(target, DraftSpec{0.0, std::nullopt}, rng) == target);
}

TEST_CASE("draft keeps the requested layers and perturbs relative to each matrix") {
  ModelConfig c;
  auto target = build_target(c);
  Rng rng(2);
  auto draft = derive_draft(target, DraftSpec{0.05, 2}, rng);
  CHECK(draft.num_layers() == 2);
  CHECK(draft.head == target.head);
  Mat diff = draft.embedding;
  for (std::size_t i = 0; i < diff.values.size(); ++i) diff.values[i] -= target.embedding.values[i];
  CHECK(matrix_std(diff) / matrix_std(target.embedding) == doctest::Approx(0.05).epsilon(0.05));
  Rng rng2(2);
  CHECK_THROWS_AS(derive_draft(target, DraftSpec{0.05, 5}, rng2), UsageError);
  CHECK_THROWS_AS(derive_draft(target, DraftSpec{-1.0, std::nullopt}, rng2), UsageError);
}

TEST_CASE("forward rejects out-of-vocabulary tokens") {
  auto m = build_target(small_config());
  std::vector<TokenId> toks{1, 40};
  CHECK_THROWS_AS(forward(m, toks, AttentionMask::causal(2)), UsageError);
}

TEST_CASE("single token: tree mask and causal mask agree") {
  auto m = build_target(small_config());
  std::vector<TokenId> tok{7};
  std::vector<std::size_t> parents{kNoParent};
  auto a = forward(m, tok, AttentionMask::causal(1));
  auto b = forward(m, tok, AttentionMask::tree(parents));
  CHECK(a.logits == b.logits);
}

TEST_CASE("zeroed attention leaves only the embedding and MoE path") {
  auto cfg = small_config();
  cfg.num_layers = 1;
  auto m = build_target(cfg);
  auto& at = m.blocks[0].attn;
  for (Mat* w : {&at.wq, &at.wk, &at.wv, &at.wo}) std::fill(w->values.begin(), w->values.end(), 0.0);
  const TokenId tok = 5;
  Vec h(m.embedding.row(tok).begin(), m.embedding.row(tok).end());
  Vec moe = moe_forward_full(m.blocks[0].moe, rms_norm(h));
  for (std::size_t c = 0; c < h.size(); ++c) h[c] += moe[c];
  Vec expect = matvec(m.head, rms_norm(h));
  std::vector<TokenId> toks{tok};
  auto fr = forward(m, toks, AttentionMask::causal(1));
  CHECK(max_abs_diff(fr.logits[0], expect) <= 1e-12);
}

TEST_CASE("chain tree forward equals the sequential causal forward") {
  auto m = build_target(ModelConfig{});
  Rng rng(4);
  auto prompt = random_tokens(6, 256, rng);
  auto chain = random_tokens(5, 256, rng);
  ContextCache ctx = make_context(m, prompt);
  std::vector<std::size_t> parents{kNoParent, 0, 1, 2, 3};
  FullMoeExecutor full;
  auto tree = forward_tree(m, ctx, chain, parents, full);

  std::vector<TokenId> seq = prompt;
  seq.insert(seq.end(), chain.begin(), chain.end());
  auto ref = forward(m, seq, AttentionMask::causal(seq.size()));
  for (std::size_t i = 0; i < chain.size(); ++i) {
    CHECK(max_abs_diff(tree.logits[i], ref.logits[prompt.size() + i]) <= 1e-9);
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      CHECK(max_abs_diff(tree.layers[l].hidden[i], ref.layers[l].hidden[prompt.size() + i]) <= 1e-9);
    }
  }
}

TEST_CASE("every root-to-node path of a random tree matches its causal forward") {
  auto m = build_target(small_config(9));
  Rng rng(8);
  auto prompt = random_tokens(4, 32, rng);
  const std::size_t n = 15;
  std::vector<std::size_t> parents{kNoParent};
  for (std::size_t i = 1; i < n; ++i) parents.push_back(rng.uniform_index(i));
  auto toks = random_tokens(n, 32, rng);
  ContextCache ctx = make_context(m, prompt);
  FullMoeExecutor full;
  auto tree = forward_tree(m, ctx, toks, parents, full);
  for (std::size_t node = 0; node < n; ++node) {
    std::vector<TokenId> path;
    for (std::size_t v = node; v != kNoParent; v = parents[v]) path.insert(path.begin(), toks[v]);
    std::vector<TokenId> seq = prompt;
    seq.insert(seq.end(), path.begin(), path.end());
    auto ref = forward(m, seq, AttentionMask::causal(seq.size()));
    CHECK(max_abs_diff(tree.logits[node], ref.logits.back()) <= 1e-9);
    for (std::size_t l = 0; l < m.num_layers(); ++l)
      CHECK(max_abs_diff(tree.layers[l].hidden[node], ref.layers[l].hidden.back()) <= 1e-9);
  }
}

TEST_CASE("tree masks reject parents that follow their children") {
  std::vector<std::size_t> bad{kNoParent, 2, 0};
  CHECK_THROWS_AS(AttentionMask::tree(bad), UsageError);
}

TEST_CASE("incremental context extension matches a single causal pass") {
  auto m = build_target(small_config());
  Rng rng(10);
  auto toks = random_tokens(12, 32, rng);
  std::span<const TokenId> all(toks);
  ContextCache ctx = make_context(m, all.first(5));
  extend_context(m, ctx, all.subspan(5, 4));
  extend_context(m, ctx, all.subspan(9));
  auto ref = forward(m, toks, AttentionMask::causal(toks.size()));
  CHECK(ctx.size() == 12);
  CHECK(max_abs_diff(ctx.last_logits, ref.logits.back()) <= 1e-12);
  CHECK_THROWS_AS(make_context(m, std::span<const TokenId>{}), UsageError);
}

TEST_CASE("model files round-trip exactly") {
  auto m = build_target(small_config(12));
  Rng rng(3);
  auto draft = derive_draft(m, DraftSpec{0.1, 1}, rng);
  const auto dir = std::filesystem::temp_directory_path() / "moespec_model_test";
  std::filesystem::create_directories(dir);
  save_model(m, dir / "t.bin");
  save_model(draft, dir / "d.bin");
  CHECK(load_model(dir / "t.bin") == m);
  CHECK(load_model(dir / "d.bin") == draft);
  {
    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "not a model";
  }
  CHECK_THROWS_AS(load_model(dir / "bad.bin"), UsageError);
  CHECK_THROWS_AS(load_model(dir / "missing.bin"), UsageError);
  std::filesystem::remove_all(dir);
}
