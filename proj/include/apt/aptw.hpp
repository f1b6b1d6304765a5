// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors
//
// Prototype-weighted composition. Each source keeps K-means centroids of its
// training class embeddings; at inference a source's logits are scaled by
// softmax(-beta * d), d being the distance from the input's class embedding
// to the source's nearest centroid.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "apt/composition.hpp"

namespace apt {

struct KMeansResult {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;      // [k x dim]
  std::vector<std::size_t> assignment;
  double objective = 0.0;             // sum of squared distances to the assigned centroid
  std::size_t iterations = 0;
  std::vector<double> history;        // objective after every assignment step
  std::vector<std::string> warnings;
};

struct KMeansOptions {
  std::size_t max_iterations = 100;
  /// Independent k-means++ restarts; the lowest objective wins.
  std::size_t n_init = 10;
};

/// Lloyd's algorithm from k-means++ seeding. Stops when assignments repeat or
/// after max_iterations. An empty cluster is re-seeded at the point farthest
/// from its current centroid. K larger than the number of points is reduced
/// to it, with a warning. Throws DataError on an empty point set and
/// ConfigError on K = 0.
KMeansResult kmeans(std::span<const double> points, std::size_t dim, std::size_t K, std::uint64_t seed,
                    const KMeansOptions& options = {});

/// Clusters the class embeddings of every sample of a source.
template <typename T>
PrototypeSet build_prototypes(const SampleSource& data, const BackboneParams<T>& backbone, std::size_t K,
                              std::uint64_t seed);

/// Euclidean distance to the nearest centroid.
double min_distance(std::span<const double> embedding, const PrototypeSet& prototypes);

/// softmax(-beta * d). Throws ConfigError on negative beta.
std::vector<double> source_weights(std::span<const double> distances, double beta);

enum class WeightingMode { cil, dil };

struct WeightingConfig {
  double beta = 0.1;
  WeightingMode mode = WeightingMode::cil;
  /// Weight softmax probabilities instead of logits (DIL only).
  bool weight_probabilities = false;
};

/// Per-input source weights, [B x |I|] row-major.
template <typename T>
std::vector<double> selection_weights(const SelectionOutput<T>& out, const std::vector<const PrototypeSet*>& protos,
                                      double beta);

/// CIL: weighted logits scattered through disjoint label maps (uncovered
/// classes -infinity). DIL: (1/|I|) sum_i w_i * logits_i in the shared label
/// space, or the same over probabilities when requested.
template <typename T>
ScoreMatrix weighted_scores(const SelectionOutput<T>& out, const std::vector<const PrototypeSet*>& protos,
                            std::size_t n_classes, const WeightingConfig& config);

/// Throws ConfigError when a selected source has no prototypes.
template <typename T>
ScoreMatrix aptw_predict(const BackboneParams<T>& backbone, const Tensor<T>& patches, std::size_t batch,
                         const PromptSource<T>& pool, const std::vector<std::string>& ids,
                         const WeightingConfig& config);

/// Prototypes of the selected sources, in selection order.
template <typename T>
std::vector<const PrototypeSet*> selected_prototypes(const PromptSource<T>& pool, const std::vector<std::string>& ids);

}  // namespace apt
