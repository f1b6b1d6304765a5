// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors
//
// The prompt pool and the rules that combine per-source predictions:
// probability averaging, majority vote, class-incremental concatenation and
// finetuned-model ensembles.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "apt/json_io.hpp"
#include "apt/prompt.hpp"
#include "apt/trainer.hpp"

namespace apt {

/// Read access to prompt sets by id. Prediction code reaches sources only
/// through `get`, so a wrapper can observe exactly which sources were read.
template <typename T>
class PromptSource {
 public:
  virtual ~PromptSource() = default;
  /// Throws LookupError for an unknown id.
  virtual const SourcePromptSet<T>& get(const std::string& id) const = 0;
  virtual bool contains(const std::string& id) const = 0;
  virtual std::vector<std::string> ids() const = 0;
  virtual std::size_t n_classes() const = 0;
};

struct PoolDefaults {
  std::size_t K = 20;
  double beta = 0.1;
};

/// Sources trained against one backbone. A pool is either in memory only or
/// bound to a directory holding `manifest.json`, one `<id>.bin` tensor blob
/// per source and an optional `<id>.proto.bin` with its prototypes. Adding or
/// removing a source touches only its own files and the manifest, which is
/// replaced atomically. Concurrent readers are fine; writers must be
/// serialized by the caller.
template <typename T>
class PromptPool : public PromptSource<T> {
 public:
  PromptPool(std::string name, BackboneConfig backbone, std::string fingerprint, std::size_t n_classes,
             PoolDefaults defaults = {});

  /// Creates an empty pool directory; throws PoolError if it already holds a manifest.
  static PromptPool create(const std::filesystem::path& dir, std::string name, BackboneConfig backbone,
                           std::string fingerprint, std::size_t n_classes, PoolDefaults defaults = {});
  /// Loads a pool directory. Throws FormatError on malformed files or a blob
  /// that does not match its recorded digest, and StalePromptError when a
  /// source records a different backbone fingerprint than the pool.
  static PromptPool open(const std::filesystem::path& dir);

  const SourcePromptSet<T>& get(const std::string& id) const override;
  bool contains(const std::string& id) const override { return sources_.contains(id); }
  std::vector<std::string> ids() const override { return order_; }
  std::size_t n_classes() const override { return n_classes_; }

  /// Throws CompositionError on a duplicate id, StalePromptError when the
  /// source was trained against another backbone and ConfigError on shape or
  /// label-map problems.
  void add(SourcePromptSet<T> source);
  /// Deletes the source and, for a bound pool, its files. Throws LookupError.
  void remove(const std::string& id);

  const std::string& name() const { return name_; }
  const std::string& fingerprint() const { return fingerprint_; }
  const BackboneConfig& backbone_config() const { return backbone_; }
  const PoolDefaults& defaults() const { return defaults_; }
  const std::optional<std::filesystem::path>& directory() const { return dir_; }
  std::size_t size() const { return order_.size(); }

  Json manifest() const;

 private:
  void write_manifest() const;

  std::string name_;
  BackboneConfig backbone_;
  std::string fingerprint_;
  std::size_t n_classes_;
  PoolDefaults defaults_;
  std::optional<std::filesystem::path> dir_;
  std::vector<std::string> order_;
  std::map<std::string, SourcePromptSet<T>> sources_;
  std::map<std::string, std::string> digests_;
};

/// Removes a source from the pool (and its bytes from the pool directory).
template <typename T>
void forget_source(PromptPool<T>& pool, const std::string& id) {
  pool.remove(id);
}

template <typename T>
void add_source(PromptPool<T>& pool, SourcePromptSet<T> source) {
  pool.add(std::move(source));
}

/// Tensor blob of a source: prompt, memory blocks, head weight, head bias.
template <typename T>
std::string encode_source_blob(const SourcePromptSet<T>& source);

// ---------------------------------------------------------------------------
// Per-source outputs

/// Raw head logits of each selected source plus the class embedding of every
/// input (final_norm of the class token), from one composed forward pass.
template <typename T>
struct SelectionOutput {
  std::size_t batch = 0;
  std::vector<std::string> ids;
  std::vector<std::vector<int>> label_maps;
  std::vector<Tensor<T>> logits;  // per source: [B x n_local]
  Tensor<T> class_embedding;      // [B x d]
};

/// Throws SelectionError when `ids` is empty or repeats an id and LookupError
/// when an id is not in `pool`. Reads only the listed sources.
template <typename T>
SelectionOutput<T> select_and_forward(const BackboneParams<T>& backbone, const Tensor<T>& patches,
                                      std::size_t batch, const PromptSource<T>& pool,
                                      const std::vector<std::string>& ids);

/// Same, from a Phase-1 output computed earlier (`cache` must hold the layer
/// keys and values).
template <typename T>
SelectionOutput<T> select_and_forward(const BackboneParams<T>& backbone, const BackboneOutput<T>& cache,
                                      const PromptSource<T>& pool, const std::vector<std::string>& ids);

/// Row-major [B x n_classes] scores.
struct ScoreMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
  /// Highest score per row; the lowest class index wins ties.
  std::vector<int> argmax() const;
};

/// Mean over sources of softmax(logits) mapped into the global label space.
template <typename T>
ScoreMatrix average_probabilities(const SelectionOutput<T>& out, std::size_t n_classes);

/// Mean over sources of raw logits in a shared label space (classes a
/// source does not cover contribute zero).
template <typename T>
ScoreMatrix average_logits(const SelectionOutput<T>& out, std::size_t n_classes);

/// Each source votes its argmax class; plurality wins, ties go to the lowest
/// global class index.
template <typename T>
std::vector<int> majority_vote(const SelectionOutput<T>& out, std::size_t n_classes);

/// Raw logits scattered into the global vector through disjoint label maps;
/// classes no source covers score -infinity. Throws CompositionError when two
/// label maps overlap. Optional per-source temperatures divide the logits.
template <typename T>
ScoreMatrix concat_logits(const SelectionOutput<T>& out, std::size_t n_classes,
                          const std::vector<double>& temperatures = {});

/// Averaged global distribution over the selected sources.
template <typename T>
ScoreMatrix apt_predict(const BackboneParams<T>& backbone, const Tensor<T>& patches, std::size_t batch,
                        const PromptSource<T>& pool, const std::vector<std::string>& ids);

template <typename T>
std::vector<int> majority_vote_predict(const BackboneParams<T>& backbone, const Tensor<T>& patches,
                                       std::size_t batch, const PromptSource<T>& pool,
                                       const std::vector<std::string>& ids);

/// Class-incremental prediction: argmax of the concatenated logits.
template <typename T>
std::vector<int> cil_predict(const BackboneParams<T>& backbone, const Tensor<T>& patches, std::size_t batch,
                             const PromptSource<T>& pool, const std::vector<std::string>& ids);

/// Mean of per-model softmax outputs in the global label space.
template <typename T>
ScoreMatrix ensemble_finetuned(const std::vector<const FinetunedModel<T>*>& models, const Tensor<T>& patches,
                               std::size_t batch, std::size_t n_classes);

/// Mean of head-only softmax outputs over one shared backbone pass.
template <typename T>
ScoreMatrix ensemble_heads(const BackboneParams<T>& backbone, const std::vector<const HeadModel<T>*>& heads,
                           const Tensor<T>& patches, std::size_t batch, std::size_t n_classes);

double accuracy(std::span<const int> predicted, std::span<const int> labels);

}  // namespace apt
