// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include "apt/vit.hpp"

#include <fstream>
#include <sstream>

#include "apt/errors.hpp"
#include "apt/io.hpp"
#include "apt/json_io.hpp"
#include "apt/random.hpp"

namespace apt {

void BackboneConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("backbone.") + name + " must be positive");
  };
  positive(image_size, "image_size");
  positive(patch_size, "patch_size");
  positive(channels, "channels");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(mlp_ratio, "mlp_ratio");
  positive(n_classes_proxy, "n_classes_proxy");
  if (image_size % patch_size)
    throw ConfigError("patch size " + std::to_string(patch_size) + " does not tile image size " +
                      std::to_string(image_size));
  if (d_model % n_heads)
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(n_heads) + " heads");
}

namespace {

// Calls f(name, tensor) for every parameter in canonical order.
template <typename P, typename F>
void visit_params(P& p, F&& f) {
  f("patch_embed.weight", p.patch_embed.weight);
  f("patch_embed.bias", p.patch_embed.bias);
  f("class_token", p.class_token);
  f("pos_embed", p.pos_embed);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    f(pre + "ln1.weight", b.ln1.weight);
    f(pre + "ln1.bias", b.ln1.bias);
    f(pre + "query.weight", b.query.weight);
    f(pre + "query.bias", b.query.bias);
    f(pre + "key.weight", b.key.weight);
    f(pre + "key.bias", b.key.bias);
    f(pre + "value.weight", b.value.weight);
    f(pre + "value.bias", b.value.bias);
    f(pre + "proj.weight", b.proj.weight);
    f(pre + "proj.bias", b.proj.bias);
    f(pre + "ln2.weight", b.ln2.weight);
    f(pre + "ln2.bias", b.ln2.bias);
    f(pre + "fc1.weight", b.fc1.weight);
    f(pre + "fc1.bias", b.fc1.bias);
    f(pre + "fc2.weight", b.fc2.weight);
    f(pre + "fc2.bias", b.fc2.bias);
  }
  f("final_norm.weight", p.final_norm.weight);
  f("final_norm.bias", p.final_norm.bias);
}

template <typename T>
Tensor<T> trunc_normal(Rng& rng, Shape shape, double std) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t.values()) x = static_cast<T>(rng.truncated_normal(std));
  return t;
}

template <typename T>
LinearParams<T> init_linear(Rng& rng, std::size_t out, std::size_t in) {
  return {trunc_normal<T>(rng, Shape{out, in}, 0.02), Tensor<T>(Shape{out})};
}

template <typename T>
NormParams<T> init_norm(std::size_t d) {
  return {Tensor<T>(Shape{d}, std::vector<T>(d, T(1))), Tensor<T>(Shape{d})};
}

}  // namespace

template <typename T>
BackboneParams<T> BackboneParams<T>::init(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.width();
  BackboneParams p;
  p.config = config;
  p.patch_embed = init_linear<T>(rng, d, config.patch_dim());
  p.class_token = Tensor<T>(Shape{1, d});
  p.pos_embed = trunc_normal<T>(rng, Shape{config.seq_len(), d}, 0.02);
  for (int l = 0; l < config.n_layers; ++l) {
    BlockParams<T> b;
    b.ln1 = init_norm<T>(d);
    b.query = init_linear<T>(rng, d, d);
    b.key = init_linear<T>(rng, d, d);
    b.value = init_linear<T>(rng, d, d);
    b.proj = init_linear<T>(rng, d, d);
    b.ln2 = init_norm<T>(d);
    b.fc1 = init_linear<T>(rng, config.mlp_width(), d);
    b.fc2 = init_linear<T>(rng, d, config.mlp_width());
    p.blocks.push_back(std::move(b));
  }
  p.final_norm = init_norm<T>(d);
  p.unfreeze();
  return p;
}

template <typename T>
std::vector<NamedTensor<T>> BackboneParams<T>::named_parameters() const {
  std::vector<NamedTensor<T>> out;
  visit_params(*this, [&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <typename T>
void BackboneParams<T>::freeze() {
  visit_params(*this, [](const std::string&, Tensor<T>& t) { t.set_requires_grad(false); });
  frozen = false;
  frozen_fingerprint = fingerprint();
  frozen = true;
}

template <typename T>
void BackboneParams<T>::unfreeze() {
  visit_params(*this, [](const std::string&, Tensor<T>& t) { t.set_requires_grad(true); });
  frozen = false;
  frozen_fingerprint.clear();
}

template <typename T>
BackboneParams<T> BackboneParams<T>::clone() const {
  return cast<T>();
}

template <typename T>
template <typename U>
BackboneParams<U> BackboneParams<T>::cast() const {
  BackboneParams<U> out;
  out.config = config;
  out.frozen = frozen;
  out.frozen_fingerprint = frozen_fingerprint;
  out.blocks.resize(blocks.size());
  const auto src = named_parameters();
  std::size_t i = 0;
  visit_params(out, [&](const std::string&, Tensor<U>& t) { t = src[i++].second.template cast<U>(); });
  return out;
}

template <typename T>
std::string BackboneParams<T>::fingerprint() const {
  if (frozen && !frozen_fingerprint.empty()) return frozen_fingerprint;
  std::vector<Tensor<T>> tensors;
  for (auto& [name, t] : named_parameters()) tensors.push_back(t);
  return sha256_hex(serialize_tensors<T>(tensors, DType::f32));
}

template <typename T>
Tensor<T> patchify(const ImageBatch& images, const BackboneConfig& config) {
  const std::size_t B = images.size(), N = config.n_patches(), P = config.patch_dim();
  const std::size_t ps = static_cast<std::size_t>(config.patch_size);
  const std::size_t C = static_cast<std::size_t>(config.channels);
  const std::size_t W = static_cast<std::size_t>(config.image_size);
  const std::size_t G = config.grid();
  Tensor<T> out(Shape{B * N, P});
  T* o = out.data();
  for (std::size_t b = 0; b < B; ++b) {
    if (images[b].size() != config.image_bytes())
      throw ConfigError("image " + std::to_string(b) + " has " + std::to_string(images[b].size()) +
                        " bytes, backbone expects " + std::to_string(config.image_bytes()));
    const std::uint8_t* img = images[b].data();
    for (std::size_t gy = 0; gy < G; ++gy)
      for (std::size_t gx = 0; gx < G; ++gx)
        for (std::size_t py = 0; py < ps; ++py)
          for (std::size_t px = 0; px < ps; ++px) {
            const std::uint8_t* pix = img + ((gy * ps + py) * W + gx * ps + px) * C;
            for (std::size_t c = 0; c < C; ++c) *o++ = static_cast<T>(pix[c]) / T(255);
          }
  }
  return out;
}

template <typename T>
Tensor<T> embed(const BackboneParams<T>& params, const Tensor<T>& patches, std::size_t batch) {
  const auto e = linear(patches, params.patch_embed.weight, params.patch_embed.bias);
  const auto z = concat_groups(repeat_rows(params.class_token, batch), e, batch);
  return add(z, repeat_rows(params.pos_embed, batch));
}

template <typename T>
Tensor<T> mlp_residual(const BlockParams<T>& block, const Tensor<T>& x) {
  const auto h = layernorm(x, block.ln2.weight, block.ln2.bias);
  const auto u = gelu(linear(h, block.fc1.weight, block.fc1.bias));
  return add(x, linear(u, block.fc2.weight, block.fc2.bias));
}

template <typename T>
Tensor<T> block_forward(const BackboneParams<T>& params, std::size_t layer, const Tensor<T>& tokens,
                        std::size_t batch, const AttentionMask* mask, const Tensor<T>& key_only,
                        LayerKV<T>* kv) {
  const auto& blk = params.blocks.at(layer);
  const auto h = layernorm(tokens, blk.ln1.weight, blk.ln1.bias);
  AttentionArgs<T> args;
  args.q = linear(h, blk.query.weight, blk.query.bias);
  args.k = linear(h, blk.key.weight, blk.key.bias);
  args.v = linear(h, blk.value.weight, blk.value.bias);
  if (key_only.defined() && key_only.numel() > 0) {
    const auto hm = layernorm(key_only, blk.ln1.weight, blk.ln1.bias);
    args.k_shared = linear(hm, blk.key.weight, blk.key.bias);
    args.v_shared = linear(hm, blk.value.weight, blk.value.bias);
  }
  args.batch = batch;
  args.heads = static_cast<std::size_t>(params.config.n_heads);
  args.mask = mask;
  if (kv) *kv = {tokens, args.k, args.v};
  const auto a = attention(args);
  const auto x = add(tokens, linear(a, blk.proj.weight, blk.proj.bias));
  return mlp_residual(blk, x);
}

template <typename T>
Tensor<T> final_norm(const BackboneParams<T>& params, const Tensor<T>& x) {
  return layernorm(x, params.final_norm.weight, params.final_norm.bias);
}

template <typename T>
BackboneOutput<T> forward_backbone(const BackboneParams<T>& params, const Tensor<T>& patches,
                                   std::size_t batch, bool keep_cache) {
  BackboneOutput<T> out;
  out.batch = batch;
  auto z = embed(params, patches, batch);
  if (keep_cache) out.layers.resize(params.blocks.size());
  for (std::size_t l = 0; l < params.blocks.size(); ++l)
    z = block_forward(params, l, z, batch, nullptr, Tensor<T>{}, keep_cache ? &out.layers[l] : nullptr);
  out.tokens = z;
  return out;
}

template <typename T>
Tensor<T> class_embedding(const BackboneParams<T>& params, const BackboneOutput<T>& out) {
  const std::size_t S = params.config.seq_len();
  std::vector<std::size_t> rows(out.batch);
  for (std::size_t b = 0; b < out.batch; ++b) rows[b] = b * S;
  return final_norm(params, select_rows(out.tokens, std::span<const std::size_t>(rows)));
}

// ---------------------------------------------------------------------------

void reject_unknown_keys(const Json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == it.key();
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + std::string(what));
  }
}

Json parse_json(std::string_view text, std::string_view what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

void to_json(Json& j, const BackboneConfig& c) {
  j = Json{{"image_size", c.image_size}, {"patch_size", c.patch_size},
           {"channels", c.channels},     {"d_model", c.d_model},
           {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
           {"mlp_ratio", c.mlp_ratio},   {"n_classes_proxy", c.n_classes_proxy}};
}

void from_json(const Json& j, BackboneConfig& c) {
  reject_unknown_keys(j,
                      {"image_size", "patch_size", "channels", "d_model", "n_layers", "n_heads",
                       "mlp_ratio", "n_classes_proxy"},
                      "backbone config");
  read_optional(j, "image_size", c.image_size);
  read_optional(j, "patch_size", c.patch_size);
  read_optional(j, "channels", c.channels);
  read_optional(j, "d_model", c.d_model);
  read_optional(j, "n_layers", c.n_layers);
  read_optional(j, "n_heads", c.n_heads);
  read_optional(j, "mlp_ratio", c.mlp_ratio);
  read_optional(j, "n_classes_proxy", c.n_classes_proxy);
  c.validate();
}

void save_backbone(const BackboneParams<float>& params, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream blob;
  Json names = Json::array();
  for (const auto& [name, t] : params.named_parameters()) {
    write_tensor(blob, t, DType::f32);
    names.push_back(name);
  }
  write_file_atomic(dir / "backbone.bin", blob.str());
  const Json manifest{{"config", params.config},
                      {"tensors", names},
                      {"fingerprint", params.fingerprint()}};
  write_file_atomic(dir / "backbone.json", manifest.dump(2) + "\n");
}

BackboneParams<float> load_backbone(const std::filesystem::path& dir) {
  const Json manifest = parse_json(read_file(dir / "backbone.json"), "backbone.json");
  BackboneConfig config;
  try {
    config = manifest.at("config").get<BackboneConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("backbone.json: ") + e.what());
  }
  auto p = BackboneParams<float>::init(config, 0);
  std::istringstream blob(read_file(dir / "backbone.bin"));
  const auto names = manifest.value("tensors", Json::array());
  std::size_t i = 0;
  visit_params(p, [&](const std::string& name, Tensor<float>& t) {
    if (i >= names.size() || names[i] != name)
      throw FormatError("backbone.json: tensor " + std::to_string(i) + " is not " + name);
    auto loaded = read_tensor<float>(blob);
    if (loaded.shape() != t.shape())
      throw FormatError("backbone.bin: " + name + " has shape " + shape_str(loaded.shape()) +
                        ", expected " + shape_str(t.shape()));
    t = loaded;
    ++i;
  });
  if (blob.peek() != std::char_traits<char>::eof())
    throw FormatError("backbone.bin: trailing bytes");
  const auto fp = p.fingerprint();
  if (manifest.contains("fingerprint") && manifest["fingerprint"] != fp)
    throw PoolError("backbone fingerprint mismatch: stored " +
                    manifest["fingerprint"].get<std::string>() + ", computed " + fp);
  p.freeze();
  return p;
}

#define APT_INSTANTIATE_VIT(T)                                                                  \
  template struct BackboneParams<T>;                                                            \
  template Tensor<T> patchify<T>(const ImageBatch&, const BackboneConfig&);                     \
  template Tensor<T> embed<T>(const BackboneParams<T>&, const Tensor<T>&, std::size_t);         \
  template Tensor<T> block_forward<T>(const BackboneParams<T>&, std::size_t, const Tensor<T>&,  \
                                      std::size_t, const AttentionMask*, const Tensor<T>&,      \
                                      LayerKV<T>*);                                             \
  template Tensor<T> mlp_residual<T>(const BlockParams<T>&, const Tensor<T>&);                  \
  template Tensor<T> final_norm<T>(const BackboneParams<T>&, const Tensor<T>&);                 \
  template BackboneOutput<T> forward_backbone<T>(const BackboneParams<T>&, const Tensor<T>&,    \
                                                 std::size_t, bool);                            \
  template Tensor<T> class_embedding<T>(const BackboneParams<T>&, const BackboneOutput<T>&);

APT_INSTANTIATE_VIT(float)
APT_INSTANTIATE_VIT(double)

template BackboneParams<double> BackboneParams<float>::cast<double>() const;
template BackboneParams<float> BackboneParams<double>::cast<float>() const;

#undef APT_INSTANTIATE_VIT

}  // namespace apt
