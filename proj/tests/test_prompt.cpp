// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include <doctest.h>

#include <cmath>
#include <random>

#include "apt/errors.hpp"
#include "apt/prompt.hpp"

using namespace apt;

namespace {

BackboneConfig tiny_config(int layers = 2) {
  BackboneConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.d_model = 8;
  c.n_layers = layers;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

// Inflates the default 0.02 init so attention patterns are far from uniform.
template <typename T>
BackboneParams<T> frozen_backbone(const BackboneConfig& c, std::uint64_t seed) {
  auto p = BackboneParams<T>::init(c, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.5);
  for (auto& [name, t] : p.named_parameters())
    if (name.find("ln") == std::string::npos && name.find("norm") == std::string::npos)
      for (auto& x : const_cast<Tensor<T>&>(t).values()) x = static_cast<T>(n(rng));
  p.freeze();
  return p;
}

template <typename T>
SourcePromptSet<T> make_source(const BackboneParams<T>& bb, const std::string& id, std::uint64_t seed,
                               PromptShape shape = {}, std::vector<int> labels = {0, 1, 2}) {
  auto s = SourcePromptSet<T>::init(id, shape, bb.config, std::move(labels), bb.fingerprint(), seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& [name, t] : s.parameters())
    for (auto& x : const_cast<Tensor<T>&>(t).values()) x = static_cast<T>(n(rng));
  return s;
}

std::vector<std::vector<std::uint8_t>> random_images(const BackboneConfig& c, std::size_t n,
                                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::uint8_t>> out(n, std::vector<std::uint8_t>(c.image_bytes()));
  for (auto& img : out)
    for (auto& b : img) b = static_cast<std::uint8_t>(rng() & 0xFF);
  return out;
}

ImageBatch as_batch(const std::vector<std::vector<std::uint8_t>>& imgs) {
  ImageBatch b;
  for (const auto& i : imgs) b.emplace_back(i);
  return b;
}

// max |a - b| / max |b|
template <typename T>
double rel_error(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    den = std::max(den, std::abs(static_cast<double>(b[i])));
  }
  return den == 0.0 ? num : num / den;
}

}  // namespace

TEST_CASE("three-prompt mask reproduces the masking table") {
  // Rows: z, p1, p2, p3. Columns: z, p1, p2, p3, m1, m2, m3.
  const std::vector<std::string> table = {
      "1000000",
      "1100100",
      "1010010",
      "1001001",
  };
  CHECK(build_mask(1, {"a", "b", "c"}, 1, 1).render() == table);

  // With several z tokens and memory tokens every cell becomes a block.
  const auto m = build_mask(5, {"a", "b", "c"}, 1, 5);
  REQUIRE(m.rows() == 8);
  REQUIRE(m.cols() == 8 + 15);
  auto block_row = [](std::size_t r) { return r < 5 ? 0 : r - 4; };
  auto block_col = [](std::size_t c) { return c < 5 ? 0 : c < 8 ? c - 4 : 4 + (c - 8) / 5; };
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c)
      CHECK(m.allowed(r, c) == (table[block_row(r)][block_col(c)] == '1'));
}

TEST_CASE("mask edge cases") {
  const auto none = build_mask(5, std::vector<std::string>{});
  CHECK(none == AttentionMask::full(5, 5));

  const auto one = build_mask(3, {"x"}, 1, 2);
  CHECK(one.render() == std::vector<std::string>{"111000", "111000", "111000", "111111"});

  CHECK_THROWS_AS(build_mask(3, {"x", "y", "x"}), CompositionError);

  const auto multi = build_mask(2, {PromptBlock{"a", 2, 1}, PromptBlock{"b", 1, 0}});
  CHECK(multi.render() == std::vector<std::string>{"110000", "110000", "111101", "111101", "110010"});
}

TEST_CASE("mask invariants hold for every k up to 16") {
  for (std::size_t k = 0; k <= 16; ++k) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < k; ++i) ids.push_back("s" + std::to_string(i));
    const std::size_t nz = 3, dm = 2;
    const auto m = build_mask(nz, ids, 1, dm);
    REQUIRE(m.rows() == nz + k);
    REQUIRE(m.cols() == nz + k + k * dm);
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) {
        bool expect;
        if (r < nz) expect = c < nz;
        else {
          const std::size_t i = r - nz;
          expect = c < nz || c == nz + i || (c >= nz + k + i * dm && c < nz + k + (i + 1) * dm);
        }
        CHECK(m.allowed(r, c) == expect);
      }
  }
}

TEST_CASE("two-phase forward matches the single-pass masked oracle") {
  const auto c = tiny_config();
  const auto bb = frozen_backbone<double>(c, 1);
  const auto imgs = random_images(c, 3, 2);
  const auto patches = patchify<double>(as_batch(imgs), c);
  std::vector<SourcePromptSet<double>> pool;
  for (int i = 0; i < 5; ++i) pool.push_back(make_source(bb, "s" + std::to_string(i), 10 + i));

  for (std::size_t k : {0u, 1u, 2u, 5u}) {
    CAPTURE(k);
    SourceList<double> I;
    for (std::size_t i = 0; i < k; ++i) I.push_back(&pool[i]);
    const auto fast = composed_forward(bb, patches, 3, I);
    const auto ref = reference_forward(bb, patches, 3, I, AttentionLayout::structured);
    REQUIRE(fast.prompts.size() == k);
    CHECK(rel_error(fast.tokens, ref.tokens) <= 1e-12);
    for (std::size_t i = 0; i < k; ++i) CHECK(rel_error(fast.prompts[i], ref.prompts[i]) <= 1e-12);
  }
}

TEST_CASE("variants and multi-token prompts match the oracle as well") {
  const auto c = tiny_config(3);
  const auto bb = frozen_backbone<double>(c, 3);
  const auto imgs = random_images(c, 2, 4);
  const auto patches = patchify<double>(as_batch(imgs), c);
  const auto deep = make_source(bb, "deep", 1, {PromptVariant::deep, 1, 5});
  const auto shared = make_source(bb, "shared", 2, {PromptVariant::deep_shared, 2, 3});
  const auto shallow = make_source(bb, "shallow", 3, {PromptVariant::shallow, 3, 5});
  CHECK(deep.memory.size() == 3);
  CHECK(shared.memory.size() == 1);
  CHECK(shallow.memory.empty());
  CHECK(shallow.shape.d_mem == 0);
  const SourceList<double> I{&deep, &shared, &shallow};
  const auto fast = composed_forward(bb, patches, 2, I);
  const auto ref = reference_forward(bb, patches, 2, I, AttentionLayout::structured);
  for (std::size_t i = 0; i < 3; ++i) CHECK(rel_error(fast.prompts[i], ref.prompts[i]) <= 1e-12);
  CHECK(fast.prompts[2].shape() == Shape{6, 8});
  CHECK(prompt_features(bb, fast.prompts[2], 2).shape() == Shape{2, 8});
}

TEST_CASE("a prompt's output does not depend on the other prompts") {
  const auto c = tiny_config();
  const auto bb = frozen_backbone<float>(c, 5);
  const auto imgs = random_images(c, 2, 6);
  const auto patches = patchify<float>(as_batch(imgs), c);
  const auto a = make_source(bb, "a", 1), b = make_source(bb, "b", 2), d = make_source(bb, "d", 3);
  const auto alone = composed_forward(bb, patches, 2, {&a});
  const auto with = composed_forward(bb, patches, 2, {&d, &b, &a});
  CHECK(rel_error(alone.prompts[0], with.prompts[2]) == 0.0);

  const auto backbone_only = forward_backbone(bb, patches, 2, false);
  CHECK(rel_error(with.tokens, backbone_only.tokens) == 0.0);

  // The naive concatenation has no such guarantee.
  const auto naive1 = naive_concat_forward(bb, patches, 2, {&a});
  const auto naive3 = naive_concat_forward(bb, patches, 2, {&d, &b, &a});
  CHECK(rel_error(naive1.prompts[0], naive3.prompts[0]) > 1e-4);
  CHECK(rel_error(naive1.tokens, backbone_only.tokens) > 1e-4);
  CHECK(rel_error(naive_concat_forward(bb, patches, 2, {}).tokens, backbone_only.tokens) <= 1e-6);
}

TEST_CASE("sources trained on another backbone are rejected") {
  const auto c = tiny_config();
  const auto bb = frozen_backbone<float>(c, 7);
  const auto other = frozen_backbone<float>(c, 8);
  const auto stale = make_source(other, "old", 1);
  const auto ok = make_source(bb, "new", 2);
  const auto imgs = random_images(c, 1, 9);
  const auto patches = patchify<float>(as_batch(imgs), c);
  CHECK_THROWS_AS(composed_forward(bb, patches, 1, {&ok, &stale}), StalePromptError);
  CHECK_THROWS_AS(reference_forward(bb, patches, 1, {&stale}, AttentionLayout::structured), StalePromptError);
  CHECK_THROWS_AS(composed_forward(bb, patches, 1, {&ok, &ok}), CompositionError);
}

TEST_CASE("predict_source") {
  Tensor<double> feats(Shape{1, 3}, std::vector<double>{0.3, -1.0, 2.0});
  LinearParams<double> head{Tensor<double>(Shape{4, 3}), Tensor<double>(Shape{4})};
  const auto uniform = predict_source(feats, head, true);
  for (std::size_t i = 0; i < 4; ++i) CHECK(uniform[i] == doctest::Approx(0.25));
  head.bias[2] = 10.0;
  const auto peaked = predict_source(feats, head, true);
  CHECK(peaked[2] == doctest::Approx(1.0 / (1.0 + 3.0 * std::exp(-10.0))).epsilon(1e-12));
  const auto logits = predict_source(feats, head, false);
  CHECK(logits[2] == 10.0);
  CHECK(rel_error(softmax(logits, 1), peaked) == 0.0);
}

TEST_CASE("analytic FLOP models") {
  FlopModel m;
  CHECK(flops_composed(m, 0) == flops_backbone(m));
  CHECK(flops_naive(m, 0) == flops_backbone(m));
  const double step = flops_composed(m, 1) - flops_composed(m, 0);
  CHECK(step > 0);
  for (std::size_t k = 1; k <= 32; ++k)
    CHECK(flops_composed(m, k) - flops_composed(m, 0) == doctest::Approx(step * static_cast<double>(k)));
  for (std::size_t k = 1; k < 32; ++k) {
    const double d2 = flops_naive(m, k + 1) - 2 * flops_naive(m, k) + flops_naive(m, k - 1);
    CHECK(d2 > 0);
  }
  CHECK(flops_ensemble(m, 4) == 4 * flops_composed(m, 1));
  CHECK(flops_composed(m, 32) < flops_ensemble(m, 32));
}

TEST_CASE("prompt averaging") {
  const auto c = tiny_config();
  const auto bb = frozen_backbone<double>(c, 11);
  const auto a = make_source(bb, "a", 1);
  const auto self = average_prompts<double>({&a, &a});
  for (const auto& [name, t] : self.parameters()) {
    const auto orig = a.parameters();
    for (const auto& [n2, t2] : orig)
      if (n2 == name) CHECK(rel_error(t, t2) == 0.0);
  }
  auto neg = a.clone();
  neg.source_id = "neg";
  for (auto& [name, t] : neg.parameters())
    for (auto& x : const_cast<Tensor<double>&>(t).values()) x = -x;
  const auto zero = average_prompts<double>({&a, &neg});
  for (double x : zero.prompt.values()) CHECK(x == 0.0);
  for (double x : zero.memory[1].values()) CHECK(x == 0.0);

  const auto other = make_source(bb, "o", 2, {}, {3, 4, 5});
  CHECK_THROWS_AS(average_prompts<double>({&a, &other}), CompositionError);
  const auto shallow = make_source(bb, "s", 3, {PromptVariant::shallow, 1, 5});
  CHECK_THROWS_AS(average_prompts<double>({&a, &shallow}), CompositionError);
  CHECK_THROWS_AS(average_prompts<double>({}), SelectionError);
}

TEST_CASE("source validation") {
  const auto c = tiny_config();
  const auto bb = frozen_backbone<float>(c, 12);
  CHECK_THROWS_AS(SourcePromptSet<float>::init("x", {}, c, {1, 1}, "", 0), ConfigError);
  CHECK_THROWS_AS(SourcePromptSet<float>::init("x", {}, c, {-1}, "", 0), ConfigError);
  CHECK_THROWS_AS(SourcePromptSet<float>::init("x", {}, c, {}, "", 0), ConfigError);
  CHECK_THROWS_AS(parse_variant("wide"), ConfigError);
  CHECK(parse_variant(to_string(PromptVariant::deep_shared)) == PromptVariant::deep_shared);
  const auto s = SourcePromptSet<float>::init("x", {}, c, {4, 2}, bb.fingerprint(), 1);
  CHECK(s.parameters().size() == 1 + 2 + 2);
  CHECK(s.memory_rows() == 5);
  const auto d = s.cast<double>();
  CHECK(d.label_map == s.label_map);
}

TEST_CASE("gathered cache rows match a direct backbone pass") {
  const auto c = tiny_config();
  const auto bb = frozen_backbone<double>(c, 13);
  const auto imgs = random_images(c, 4, 14);
  const auto all = forward_backbone(bb, patchify<double>(as_batch(imgs), c), 4, true);
  const std::vector<std::size_t> pick{3, 1};
  const auto sub = gather_cache(all, std::span<const std::size_t>(pick), c.seq_len());
  const auto direct = forward_backbone(bb, patchify<double>({imgs[3], imgs[1]}, c), 2, true);
  CHECK(rel_error(sub.tokens, direct.tokens) <= 1e-12);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(rel_error(sub.layers[l].keys, direct.layers[l].keys) <= 1e-12);
    CHECK(rel_error(sub.layers[l].values, direct.layers[l].values) <= 1e-12);
  }
  const auto s = make_source(bb, "a", 1);
  CHECK(rel_error(prompt_forward(bb, sub, s), prompt_forward(bb, direct, s)) <= 1e-12);
}

TEST_CASE("prompt-tuning loss gradients pass a finite-difference check") {
  const auto c = tiny_config(1);
  const auto bb = frozen_backbone<double>(c, 15);
  auto s = make_source(bb, "a", 16);
  const auto imgs = random_images(c, 2, 17);
  const auto patches = patchify<double>(as_batch(imgs), c);
  const std::vector<int> labels{2, 0};
  auto f = [&] {
    const auto out = composed_forward(bb, patches, 2, {&s});
    return cross_entropy(predict_source(prompt_features(bb, out.prompts[0], 2), s.head, false),
                         std::span<const int>(labels));
  };
  std::vector<std::pair<std::string, Tensor<double>>> params;
  for (const auto& [name, t] : s.parameters()) params.emplace_back(name, t);
  const auto r = grad_check(f, params);
  CHECK(r.coordinates == 8 + 5 * 8 + 3 * 8 + 3);
  CHECK(r.max_relative_error < 1e-4);
}
