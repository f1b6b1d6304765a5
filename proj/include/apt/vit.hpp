// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors
//
// Miniature vision transformer: linear patch embedding, a shared class token,
// learned positional encodings and pre-norm blocks (LayerNorm -> multi-head
// attention -> residual, LayerNorm -> GELU MLP -> residual), followed by a
// final LayerNorm used wherever a token is turned into features.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apt/attention_mask.hpp"
#include "apt/tensor.hpp"

namespace apt {

struct BackboneConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int d_model = 64;
  int n_layers = 6;
  int n_heads = 4;
  int mlp_ratio = 4;
  int n_classes_proxy = 10;

  /// Throws ConfigError on a non-positive size, a patch size that does not
  /// tile the image, or a width that does not split into the heads.
  void validate() const;

  std::size_t grid() const { return static_cast<std::size_t>(image_size / patch_size); }
  std::size_t n_patches() const { return grid() * grid(); }
  std::size_t seq_len() const { return n_patches() + 1; }
  std::size_t patch_dim() const {
    return static_cast<std::size_t>(patch_size * patch_size * channels);
  }
  std::size_t image_bytes() const {
    return static_cast<std::size_t>(image_size * image_size * channels);
  }
  std::size_t width() const { return static_cast<std::size_t>(d_model); }
  std::size_t mlp_width() const { return static_cast<std::size_t>(d_model * mlp_ratio); }

  bool operator==(const BackboneConfig&) const = default;
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [out x in]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct NormParams {
  Tensor<T> weight;  // gamma
  Tensor<T> bias;    // beta
};

template <typename T>
struct BlockParams {
  NormParams<T> ln1;
  LinearParams<T> query, key, value, proj;
  NormParams<T> ln2;
  LinearParams<T> fc1, fc2;
};

template <typename T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

template <typename T>
struct BackboneParams {
  BackboneConfig config;
  LinearParams<T> patch_embed;  // E: [d x patch_dim]
  Tensor<T> class_token;        // z^(0): [1 x d]
  Tensor<T> pos_embed;          // [(N+1) x d]
  std::vector<BlockParams<T>> blocks;
  NormParams<T> final_norm;
  bool frozen = false;

  /// Truncated-normal(0.02) weights; zero biases and class token; unit norms.
  static BackboneParams init(const BackboneConfig& config, std::uint64_t seed);

  /// Every tensor in canonical order; the order defines the blob layout.
  std::vector<NamedTensor<T>> named_parameters() const;

  void freeze();
  /// Marks parameters trainable again; used only on private copies.
  void unfreeze();

  BackboneParams clone() const;

  template <typename U>
  BackboneParams<U> cast() const;

  /// SHA-256 of the float32 blob; identical for float and double copies.
  /// Computed once at freeze() and reused while frozen.
  std::string fingerprint() const;

  std::string frozen_fingerprint;
};

using ImageBatch = std::vector<std::span<const std::uint8_t>>;

/// Flattens HWC byte images into patch rows [B*N x patch_dim], scaled to
/// [0, 1]. Row-major over the patch grid, pixels row-major within a patch.
template <typename T>
Tensor<T> patchify(const ImageBatch& images, const BackboneConfig& config);

/// z_0 = [z^(0); E x^(1..N)] + e_pos for each sample: [B*(N+1) x d].
template <typename T>
Tensor<T> embed(const BackboneParams<T>& params, const Tensor<T>& patches, std::size_t batch);

/// Keys and values of one layer, computed from LayerNorm1 of the layer input.
template <typename T>
struct LayerKV {
  Tensor<T> input;  // z_{l-1}: [B*(N+1) x d]
  Tensor<T> keys;
  Tensor<T> values;
};

/// One pre-norm block over `tokens` ([B*S x d]).
///
/// `key_only` ([M x d], optional) are appended to every sample's keys after
/// LayerNorm1 and never act as queries; `mask` ([S x (S+M)]) applies to every
/// sample. When `kv` is non-null it receives this layer's input, keys and
/// values.
template <typename T>
Tensor<T> block_forward(const BackboneParams<T>& params, std::size_t layer, const Tensor<T>& tokens,
                        std::size_t batch, const AttentionMask* mask = nullptr,
                        const Tensor<T>& key_only = {}, LayerKV<T>* kv = nullptr);

/// x + MLP(LayerNorm2(x)).
template <typename T>
Tensor<T> mlp_residual(const BlockParams<T>& block, const Tensor<T>& x);

template <typename T>
Tensor<T> final_norm(const BackboneParams<T>& params, const Tensor<T>& x);

template <typename T>
struct BackboneOutput {
  std::size_t batch = 0;
  Tensor<T> tokens;                 // z_L: [B*(N+1) x d]
  std::vector<LayerKV<T>> layers;   // empty when the cache was not requested
};

/// Runs the backbone once. With `keep_cache`, records every layer's input
/// tokens and key/value projections for reuse by prompt tokens.
template <typename T>
BackboneOutput<T> forward_backbone(const BackboneParams<T>& params, const Tensor<T>& patches,
                                   std::size_t batch, bool keep_cache = true);

/// final_norm(z_L^(0)) per sample: [B x d].
template <typename T>
Tensor<T> class_embedding(const BackboneParams<T>& params, const BackboneOutput<T>& out);

/// Checkpoint directory: backbone.json (config, tensor names, fingerprint) and
/// backbone.bin (float32 tensor blobs, concatenated in canonical order).
void save_backbone(const BackboneParams<float>& params, const std::filesystem::path& dir);
BackboneParams<float> load_backbone(const std::filesystem::path& dir);

}  // namespace apt
