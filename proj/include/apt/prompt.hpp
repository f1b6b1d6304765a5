// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors
//
// Per-source prompts with memory tokens, the structured attention mask, and
// the two-phase composed forward.
//
// Phase 1 runs the frozen backbone once per input and keeps every layer's
// key/value projections. Phase 2 advances each source's prompt tokens
// through the layers by cross-attending to those cached keys plus the
// source's own prompt and memory tokens. No source ever sees another source's
// tokens, so a prompt's output does not depend on which other prompts are
// present.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "apt/attention_mask.hpp"
#include "apt/tensor.hpp"
#include "apt/vit.hpp"

namespace apt {

enum class PromptVariant { deep, deep_shared, shallow };

std::string to_string(PromptVariant v);
/// Throws ConfigError on an unknown name.
PromptVariant parse_variant(const std::string& name);

/// K-means centroids of a source's class-token embeddings.
struct PrototypeSet {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // [k x dim], row-major
  std::string built_from;         // backbone fingerprint
  std::vector<std::string> warnings;

  std::span<const double> centroid(std::size_t i) const { return {centroids.data() + i * dim, dim}; }
};

struct PromptShape {
  PromptVariant variant = PromptVariant::deep;
  std::size_t n_tokens = 1;
  std::size_t d_mem = 5;
};

template <typename T>
struct SourcePromptSet {
  std::string source_id;
  PromptShape shape;
  Tensor<T> prompt;               // [n_tokens x d]
  std::vector<Tensor<T>> memory;  // deep: L x [d_mem x d]; deep_shared: 1; shallow: none
  LinearParams<T> head;           // [n_local x d], [n_local]
  std::vector<int> label_map;     // local class -> global class
  std::optional<PrototypeSet> prototypes;
  std::string backbone_fingerprint;

  /// Truncated-normal(0.02) prompt, memory and head weights; zero head bias.
  static SourcePromptSet init(std::string id, const PromptShape& shape, const BackboneConfig& config,
                              std::vector<int> label_map, std::string fingerprint,
                              std::uint64_t seed);

  std::size_t n_local_classes() const { return label_map.size(); }
  std::size_t memory_rows() const;
  /// Memory tokens used at `layer`; undefined tensor for the shallow variant.
  const Tensor<T>& memory_at(std::size_t layer) const;

  /// Trainable tensors in canonical order (prompt, memories, head).
  std::vector<NamedTensor<T>> parameters() const;
  /// Throws ConfigError on a non-injective or negative label map or
  /// inconsistent tensor shapes.
  void validate(const BackboneConfig& config) const;

  SourcePromptSet clone() const;
  template <typename U>
  SourcePromptSet<U> cast() const;
};

// ---------------------------------------------------------------------------
// Masks

struct PromptBlock {
  std::string id;
  std::size_t n_tokens = 1;
  std::size_t n_memory = 5;
};

/// Mask over queries [z | prompts of source 1..k] and keys
/// [z | prompts of source 1..k | memories of source 1..k]. z attends only z;
/// source i's prompt tokens attend z, themselves and memory i. Memory tokens
/// never query. Throws CompositionError on a duplicate id.
AttentionMask build_mask(std::size_t n_z, const std::vector<PromptBlock>& blocks);
AttentionMask build_mask(std::size_t n_z, const std::vector<std::string>& ids,
                         std::size_t n_tokens = 1, std::size_t d_mem = 5);

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
using SourceList = std::vector<const SourcePromptSet<T>*>;

template <typename T>
struct ComposedOutput {
  std::size_t batch = 0;
  Tensor<T> tokens;               // z_L: [B*(N+1) x d]
  std::vector<Tensor<T>> prompts; // p_L per source: [B*n_tokens x d]
};

/// Throws StalePromptError when any source was trained against a different
/// backbone.
template <typename T>
void require_fingerprints(const BackboneParams<T>& backbone, const SourceList<T>& sources);

/// Phase 2 for one source over a Phase-1 cache.
template <typename T>
Tensor<T> prompt_forward(const BackboneParams<T>& backbone, const BackboneOutput<T>& cache,
                         const SourcePromptSet<T>& source);

/// Two-phase forward: one backbone pass, then each source independently.
template <typename T>
ComposedOutput<T> composed_forward(const BackboneParams<T>& backbone, const Tensor<T>& patches,
                                   std::size_t batch, const SourceList<T>& sources);

enum class AttentionLayout {
  structured,  // build_mask pattern
  full,        // every token attends every token and every memory
};

/// Single pass of masked self-attention over the whole concatenation
/// [z, p(1..k)] with all memories appended as key-only rows. Serves as the
/// oracle for composed_forward, as the naive concatenation baseline
/// (AttentionLayout::full) and as the full-attention paragon.
template <typename T>
ComposedOutput<T> reference_forward(const BackboneParams<T>& backbone, const Tensor<T>& patches,
                                    std::size_t batch, const SourceList<T>& sources,
                                    AttentionLayout layout);

template <typename T>
ComposedOutput<T> naive_concat_forward(const BackboneParams<T>& backbone, const Tensor<T>& patches,
                                       std::size_t batch, const SourceList<T>& sources) {
  return reference_forward(backbone, patches, batch, sources, AttentionLayout::full);
}

/// final_norm of the prompt outputs, averaged over a source's prompt tokens:
/// [B*n_tokens x d] -> [B x d].
template <typename T>
Tensor<T> prompt_features(const BackboneParams<T>& backbone, const Tensor<T>& p_last,
                          std::size_t batch);

/// head(features), optionally softmaxed over local classes.
template <typename T>
Tensor<T> predict_source(const Tensor<T>& features, const LinearParams<T>& head, bool apply_softmax);

/// Elementwise mean of prompts, memories and heads. Throws CompositionError
/// when label maps or shapes differ.
template <typename T>
SourcePromptSet<T> average_prompts(const SourceList<T>& sources, std::string id = "average");

/// Restricts a Phase-1 cache to some of its samples.
template <typename T>
BackboneOutput<T> gather_cache(const BackboneOutput<T>& cache, std::span<const std::size_t> samples,
                               std::size_t seq_len);

// ---------------------------------------------------------------------------
// Analytic multiply-add counts (x2 for FLOPs) per input image.

struct FlopModel {
  BackboneConfig config;
  std::size_t n_tokens = 1;
  std::size_t d_mem = 5;
  std::size_t n_classes = 10;
};

/// One backbone forward pass plus the class-token final norm.
double flops_backbone(const FlopModel& m);
/// Phase 1 plus |I| independent Phase-2 prompt passes and heads.
double flops_composed(const FlopModel& m, std::size_t k);
/// Full attention over N+1+k*n_tokens tokens and k*d_mem memories per layer.
double flops_naive(const FlopModel& m, std::size_t k);
/// k separate models, one backbone pass each.
double flops_ensemble(const FlopModel& m, std::size_t k);

}  // namespace apt
