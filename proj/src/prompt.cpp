// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include "apt/prompt.hpp"

#include <algorithm>
#include <set>

#include "apt/errors.hpp"
#include "apt/random.hpp"

namespace apt {

std::string to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::deep: return "deep";
    case PromptVariant::deep_shared: return "deep_shared";
    case PromptVariant::shallow: return "shallow";
  }
  return "deep";
}

PromptVariant parse_variant(const std::string& name) {
  if (name == "deep") return PromptVariant::deep;
  if (name == "deep_shared") return PromptVariant::deep_shared;
  if (name == "shallow") return PromptVariant::shallow;
  throw ConfigError("unknown prompt variant '" + name + "' (expected deep, deep_shared or shallow)");
}

namespace {

template <typename T>
Tensor<T> trunc_normal(Rng& rng, Shape shape, double std) {
  Tensor<T> t(std::move(shape), true);
  for (auto& x : t.values()) x = static_cast<T>(rng.truncated_normal(std));
  return t;
}

template <typename T>
Tensor<T> mean_of(const std::vector<const Tensor<T>*>& ts) {
  Tensor<T> out(ts.front()->shape(), true);
  for (const auto* t : ts)
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += (*t)[i];
  const T inv = T(1) / static_cast<T>(ts.size());
  for (auto& x : out.values()) x *= inv;
  return out;
}

}  // namespace

template <typename T>
SourcePromptSet<T> SourcePromptSet<T>::init(std::string id, const PromptShape& shape,
                                            const BackboneConfig& config,
                                            std::vector<int> label_map, std::string fingerprint,
                                            std::uint64_t seed) {
  if (shape.n_tokens == 0) throw ConfigError("a prompt needs at least one token");
  if (shape.variant != PromptVariant::shallow && shape.d_mem == 0)
    throw ConfigError("d_mem must be positive for variant " + to_string(shape.variant));
  if (label_map.empty()) throw ConfigError("source '" + id + "' has an empty label map");
  Rng rng(seed);
  const std::size_t d = config.width();
  SourcePromptSet s;
  s.source_id = std::move(id);
  s.shape = shape;
  if (s.shape.variant == PromptVariant::shallow) s.shape.d_mem = 0;
  s.prompt = trunc_normal<T>(rng, Shape{shape.n_tokens, d}, 0.02);
  const std::size_t n_mem = shape.variant == PromptVariant::deep          ? config.n_layers
                            : shape.variant == PromptVariant::deep_shared ? 1
                                                                          : 0;
  for (std::size_t l = 0; l < n_mem; ++l)
    s.memory.push_back(trunc_normal<T>(rng, Shape{shape.d_mem, d}, 0.02));
  s.head.weight = trunc_normal<T>(rng, Shape{label_map.size(), d}, 0.02);
  s.head.bias = Tensor<T>(Shape{label_map.size()}, true);
  s.label_map = std::move(label_map);
  s.backbone_fingerprint = std::move(fingerprint);
  s.validate(config);
  return s;
}

template <typename T>
std::size_t SourcePromptSet<T>::memory_rows() const {
  return memory.empty() ? 0 : memory.front().dim(0);
}

template <typename T>
const Tensor<T>& SourcePromptSet<T>::memory_at(std::size_t layer) const {
  static const Tensor<T> none;
  switch (shape.variant) {
    case PromptVariant::deep: return memory.at(layer);
    case PromptVariant::deep_shared: return memory.at(0);
    case PromptVariant::shallow: return none;
  }
  return none;
}

template <typename T>
std::vector<NamedTensor<T>> SourcePromptSet<T>::parameters() const {
  std::vector<NamedTensor<T>> out{{"prompt", prompt}};
  for (std::size_t l = 0; l < memory.size(); ++l) out.emplace_back("memory." + std::to_string(l), memory[l]);
  out.emplace_back("head.weight", head.weight);
  out.emplace_back("head.bias", head.bias);
  return out;
}

template <typename T>
void SourcePromptSet<T>::validate(const BackboneConfig& config) const {
  const std::string who = "source '" + source_id + "': ";
  std::set<int> seen;
  for (int g : label_map) {
    if (g < 0) throw ConfigError(who + "negative global class " + std::to_string(g));
    if (!seen.insert(g).second)
      throw ConfigError(who + "label map is not injective (class " + std::to_string(g) + " repeats)");
  }
  const std::size_t d = config.width();
  if (!prompt.defined() || prompt.rank() != 2 || prompt.dim(1) != d || prompt.dim(0) != shape.n_tokens)
    throw ConfigError(who + "prompt shape does not match [n_tokens x d_model]");
  const std::size_t want = shape.variant == PromptVariant::deep          ? config.n_layers
                           : shape.variant == PromptVariant::deep_shared ? 1
                                                                         : 0;
  if (memory.size() != want)
    throw ConfigError(who + "expected " + std::to_string(want) + " memory blocks for variant " +
                      to_string(shape.variant) + ", found " + std::to_string(memory.size()));
  for (const auto& m : memory)
    if (m.rank() != 2 || m.dim(0) != shape.d_mem || m.dim(1) != d)
      throw ConfigError(who + "memory block shape " + shape_str(m.shape()) + " is not [d_mem x d_model]");
  if (head.weight.shape() != Shape{label_map.size(), d} || head.bias.shape() != Shape{label_map.size()})
    throw ConfigError(who + "head shape does not match the label map and d_model");
}

template <typename T>
SourcePromptSet<T> SourcePromptSet<T>::clone() const {
  return cast<T>();
}

template <typename T>
template <typename U>
SourcePromptSet<U> SourcePromptSet<T>::cast() const {
  SourcePromptSet<U> out;
  out.source_id = source_id;
  out.shape = shape;
  out.prompt = prompt.template cast<U>();
  for (const auto& m : memory) out.memory.push_back(m.template cast<U>());
  out.head.weight = head.weight.template cast<U>();
  out.head.bias = head.bias.template cast<U>();
  out.label_map = label_map;
  out.prototypes = prototypes;
  out.backbone_fingerprint = backbone_fingerprint;
  return out;
}

// ---------------------------------------------------------------------------

AttentionMask build_mask(std::size_t n_z, const std::vector<PromptBlock>& blocks) {
  std::set<std::string> ids;
  std::size_t n_prompt = 0, n_mem = 0;
  for (const auto& b : blocks) {
    if (!ids.insert(b.id).second) throw CompositionError("prompt '" + b.id + "' appears twice in the composition");
    n_prompt += b.n_tokens;
    n_mem += b.n_memory;
  }
  const std::size_t rows = n_z + n_prompt;
  AttentionMask mask(rows, rows + n_mem, false);
  for (std::size_t q = 0; q < n_z; ++q)
    for (std::size_t k = 0; k < n_z; ++k) mask.set(q, k, true);
  std::size_t p0 = n_z, m0 = rows;
  for (const auto& b : blocks) {
    for (std::size_t q = p0; q < p0 + b.n_tokens; ++q) {
      for (std::size_t k = 0; k < n_z; ++k) mask.set(q, k, true);
      for (std::size_t k = p0; k < p0 + b.n_tokens; ++k) mask.set(q, k, true);
      for (std::size_t k = m0; k < m0 + b.n_memory; ++k) mask.set(q, k, true);
    }
    p0 += b.n_tokens;
    m0 += b.n_memory;
  }
  return mask;
}

AttentionMask build_mask(std::size_t n_z, const std::vector<std::string>& ids, std::size_t n_tokens,
                         std::size_t d_mem) {
  std::vector<PromptBlock> blocks;
  for (const auto& id : ids) blocks.push_back({id, n_tokens, d_mem});
  return build_mask(n_z, blocks);
}

// ---------------------------------------------------------------------------

template <typename T>
void require_fingerprints(const BackboneParams<T>& backbone, const SourceList<T>& sources) {
  if (sources.empty()) return;
  const auto fp = backbone.fingerprint();
  std::set<std::string> ids;
  for (const auto* s : sources) {
    if (s->backbone_fingerprint != fp)
      throw StalePromptError("prompt '" + s->source_id + "' was trained on backbone " +
                             s->backbone_fingerprint.substr(0, 12) + ", current backbone is " +
                             fp.substr(0, 12));
    if (!ids.insert(s->source_id).second)
      throw CompositionError("prompt '" + s->source_id + "' appears twice in the composition");
  }
}

template <typename T>
Tensor<T> prompt_forward(const BackboneParams<T>& backbone, const BackboneOutput<T>& cache,
                         const SourcePromptSet<T>& source) {
  const std::size_t B = cache.batch;
  if (cache.layers.size() != backbone.blocks.size())
    throw DimensionError("prompt_forward needs a per-layer cache (got " +
                         std::to_string(cache.layers.size()) + " layers)");
  auto p = repeat_rows(source.prompt, B);
  for (std::size_t l = 0; l < backbone.blocks.size(); ++l) {
    const auto& blk = backbone.blocks[l];
    const auto h = layernorm(p, blk.ln1.weight, blk.ln1.bias);
    AttentionArgs<T> args;
    args.q = linear(h, blk.query.weight, blk.query.bias);
    args.k = concat_groups(cache.layers[l].keys, linear(h, blk.key.weight, blk.key.bias), B);
    args.v = concat_groups(cache.layers[l].values, linear(h, blk.value.weight, blk.value.bias), B);
    const auto& mem = source.memory_at(l);
    if (mem.defined()) {
      const auto hm = layernorm(mem, blk.ln1.weight, blk.ln1.bias);
      args.k_shared = linear(hm, blk.key.weight, blk.key.bias);
      args.v_shared = linear(hm, blk.value.weight, blk.value.bias);
    }
    args.batch = B;
    args.heads = static_cast<std::size_t>(backbone.config.n_heads);
    const auto x = add(p, linear(attention(args), blk.proj.weight, blk.proj.bias));
    p = mlp_residual(blk, x);
  }
  return p;
}

template <typename T>
ComposedOutput<T> composed_forward(const BackboneParams<T>& backbone, const Tensor<T>& patches,
                                   std::size_t batch, const SourceList<T>& sources) {
  require_fingerprints(backbone, sources);
  auto cache = forward_backbone(backbone, patches, batch, !sources.empty());
  ComposedOutput<T> out;
  out.batch = batch;
  out.tokens = cache.tokens;
  for (const auto* s : sources) out.prompts.push_back(prompt_forward(backbone, cache, *s));
  return out;
}

template <typename T>
ComposedOutput<T> reference_forward(const BackboneParams<T>& backbone, const Tensor<T>& patches,
                                    std::size_t batch, const SourceList<T>& sources,
                                    AttentionLayout layout) {
  require_fingerprints(backbone, sources);
  const std::size_t B = batch, S = backbone.config.seq_len();
  auto z = embed(backbone, patches, B);
  std::vector<PromptBlock> blocks;
  std::vector<Tensor<T>> prompt_parts;
  std::size_t R = 0;
  for (const auto* s : sources) {
    blocks.push_back({s->source_id, s->shape.n_tokens, s->memory_rows()});
    prompt_parts.push_back(s->prompt);
    R += s->shape.n_tokens;
  }
  if (R > 0) z = concat_groups(z, repeat_rows(concat(prompt_parts, 0), B), B);
  std::optional<AttentionMask> mask;
  if (layout == AttentionLayout::structured && !sources.empty()) mask = build_mask(S, blocks);
  for (std::size_t l = 0; l < backbone.blocks.size(); ++l) {
    std::vector<Tensor<T>> mems;
    for (const auto* s : sources)
      if (s->memory_at(l).defined()) mems.push_back(s->memory_at(l));
    const Tensor<T> key_only = mems.empty() ? Tensor<T>{} : concat(mems, 0);
    z = block_forward(backbone, l, z, B, mask ? &*mask : nullptr, key_only);
  }
  ComposedOutput<T> out;
  out.batch = B;
  if (R == 0) {
    out.tokens = z;
    return out;
  }
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < S; ++r) rows.push_back(b * (S + R) + r);
  out.tokens = select_rows(z, std::span<const std::size_t>(rows));
  std::size_t offset = S;
  for (const auto* s : sources) {
    rows.clear();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < s->shape.n_tokens; ++t) rows.push_back(b * (S + R) + offset + t);
    out.prompts.push_back(select_rows(z, std::span<const std::size_t>(rows)));
    offset += s->shape.n_tokens;
  }
  return out;
}

template <typename T>
Tensor<T> prompt_features(const BackboneParams<T>& backbone, const Tensor<T>& p_last, std::size_t batch) {
  const auto normed = final_norm(backbone, p_last);
  return p_last.rows() == batch ? normed : mean_groups(normed, batch);
}

template <typename T>
Tensor<T> predict_source(const Tensor<T>& features, const LinearParams<T>& head, bool apply_softmax) {
  const auto logits = linear(features, head.weight, head.bias);
  return apply_softmax ? softmax(logits, 1) : logits;
}

template <typename T>
SourcePromptSet<T> average_prompts(const SourceList<T>& sources, std::string id) {
  if (sources.empty()) throw SelectionError("cannot average an empty set of prompts");
  const auto& first = *sources.front();
  for (const auto* s : sources) {
    if (s->label_map != first.label_map)
      throw CompositionError("cannot average '" + s->source_id + "' with '" + first.source_id +
                             "': label maps differ");
    if (s->shape.variant != first.shape.variant || s->prompt.shape() != first.prompt.shape() ||
        s->memory.size() != first.memory.size() || s->memory_rows() != first.memory_rows())
      throw CompositionError("cannot average '" + s->source_id + "' with '" + first.source_id +
                             "': prompt shapes differ");
    if (s->backbone_fingerprint != first.backbone_fingerprint)
      throw StalePromptError("cannot average prompts trained on different backbones");
  }
  auto collect = [&](auto get) {
    std::vector<const Tensor<T>*> ts;
    for (const auto* s : sources) ts.push_back(&get(*s));
    return mean_of(ts);
  };
  SourcePromptSet<T> out;
  out.source_id = std::move(id);
  out.shape = first.shape;
  out.prompt = collect([](const SourcePromptSet<T>& s) -> const Tensor<T>& { return s.prompt; });
  for (std::size_t l = 0; l < first.memory.size(); ++l)
    out.memory.push_back(collect([l](const SourcePromptSet<T>& s) -> const Tensor<T>& { return s.memory[l]; }));
  out.head.weight = collect([](const SourcePromptSet<T>& s) -> const Tensor<T>& { return s.head.weight; });
  out.head.bias = collect([](const SourcePromptSet<T>& s) -> const Tensor<T>& { return s.head.bias; });
  out.label_map = first.label_map;
  out.backbone_fingerprint = first.backbone_fingerprint;
  return out;
}

template <typename T>
BackboneOutput<T> gather_cache(const BackboneOutput<T>& cache, std::span<const std::size_t> samples,
                               std::size_t seq_len) {
  NoGradScope<T> no_grad;
  std::vector<std::size_t> rows;
  rows.reserve(samples.size() * seq_len);
  for (auto s : samples)
    for (std::size_t r = 0; r < seq_len; ++r) rows.push_back(s * seq_len + r);
  BackboneOutput<T> out;
  out.batch = samples.size();
  if (cache.tokens.defined()) out.tokens = select_rows(cache.tokens, std::span<const std::size_t>(rows));
  for (const auto& layer : cache.layers) {
    LayerKV<T> kv;
    kv.keys = select_rows(layer.keys, std::span<const std::size_t>(rows));
    kv.values = select_rows(layer.values, std::span<const std::size_t>(rows));
    out.layers.push_back(std::move(kv));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Dims {
  double d, S, r, P, N, L, n, m, C;
  explicit Dims(const FlopModel& f)
      : d(static_cast<double>(f.config.width())),
        S(static_cast<double>(f.config.seq_len())),
        r(static_cast<double>(f.config.mlp_width())),
        P(static_cast<double>(f.config.patch_dim())),
        N(static_cast<double>(f.config.n_patches())),
        L(static_cast<double>(f.config.n_layers)),
        n(static_cast<double>(f.n_tokens)),
        m(static_cast<double>(f.d_mem)),
        C(static_cast<double>(f.n_classes)) {}
};

// Multiply-adds of one block for `q` query tokens over `keys` attended keys,
// of which `kv_new` need fresh key/value projections.
double block_macs(const Dims& x, double q, double keys, double kv_new) {
  return q * x.d * x.d         // query
         + kv_new * 2 * x.d * x.d  // key, value
         + 2 * q * keys * x.d      // scores, weighted sum
         + q * x.d * x.d           // output projection
         + 2 * q * x.d * x.r;      // MLP
}

}  // namespace

double flops_backbone(const FlopModel& f) {
  const Dims x(f);
  return 2 * (x.N * x.P * x.d + x.L * block_macs(x, x.S, x.S, x.S));
}

double flops_composed(const FlopModel& f, std::size_t k) {
  const Dims x(f);
  const double per_prompt = x.L * block_macs(x, x.n, x.S + x.n + x.m, x.n + x.m) + x.C * x.d;
  return flops_backbone(f) + 2 * static_cast<double>(k) * per_prompt;
}

double flops_naive(const FlopModel& f, std::size_t k) {
  const Dims x(f);
  const double kk = static_cast<double>(k);
  const double T = x.S + kk * x.n, M = kk * x.m;
  return 2 * (x.N * x.P * x.d + x.L * block_macs(x, T, T + M, T + M) + kk * x.C * x.d);
}

double flops_ensemble(const FlopModel& f, std::size_t k) {
  return static_cast<double>(k) * flops_composed(f, 1);
}

// ---------------------------------------------------------------------------

#define APT_INSTANTIATE_PROMPT(T)                                                                    \
  template struct SourcePromptSet<T>;                                                                \
  template void require_fingerprints<T>(const BackboneParams<T>&, const SourceList<T>&);             \
  template Tensor<T> prompt_forward<T>(const BackboneParams<T>&, const BackboneOutput<T>&,           \
                                       const SourcePromptSet<T>&);                                   \
  template ComposedOutput<T> composed_forward<T>(const BackboneParams<T>&, const Tensor<T>&,         \
                                                 std::size_t, const SourceList<T>&);                 \
  template ComposedOutput<T> reference_forward<T>(const BackboneParams<T>&, const Tensor<T>&,        \
                                                  std::size_t, const SourceList<T>&,                 \
                                                  AttentionLayout);                                  \
  template Tensor<T> prompt_features<T>(const BackboneParams<T>&, const Tensor<T>&, std::size_t);    \
  template Tensor<T> predict_source<T>(const Tensor<T>&, const LinearParams<T>&, bool);              \
  template SourcePromptSet<T> average_prompts<T>(const SourceList<T>&, std::string);                 \
  template BackboneOutput<T> gather_cache<T>(const BackboneOutput<T>&, std::span<const std::size_t>, \
                                             std::size_t);

APT_INSTANTIATE_PROMPT(float)
APT_INSTANTIATE_PROMPT(double)

template SourcePromptSet<double> SourcePromptSet<float>::cast<double>() const;
template SourcePromptSet<float> SourcePromptSet<double>::cast<float>() const;

#undef APT_INSTANTIATE_PROMPT

}  // namespace apt
