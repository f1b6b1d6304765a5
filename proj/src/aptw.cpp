// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include "apt/aptw.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "apt/errors.hpp"
#include "apt/random.hpp"

namespace apt {

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) {
    const double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

struct Run {
  std::vector<double> centroids;
  std::vector<std::size_t> assignment;
  double objective = 0;
  std::size_t iterations = 0;
  std::vector<double> history;
};

// k-means++: first centre uniform, then each next centre drawn with
// probability proportional to the squared distance to the nearest centre.
std::vector<double> seed_centres(const double* x, std::size_t n, std::size_t d, std::size_t k, Rng& rng) {
  std::vector<double> c;
  c.reserve(k * d);
  const std::size_t first = rng.below(n);
  c.insert(c.end(), x + first * d, x + (first + 1) * d);
  std::vector<double> nearest(n);
  for (std::size_t i = 0; i < n; ++i) nearest[i] = sq_dist(x + i * d, c.data(), d);
  while (c.size() < k * d) {
    double total = 0;
    for (double v : nearest) total += v;
    std::size_t pick = 0;
    if (total > 0) {
      double r = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= nearest[pick];
        if (r < 0 && nearest[pick] > 0) break;
      }
      while (nearest[pick] == 0) pick = (pick + n - 1) % n;  // never re-pick an existing centre
    } else {
      pick = rng.below(n);
    }
    const std::size_t at = c.size();
    c.insert(c.end(), x + pick * d, x + (pick + 1) * d);
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], sq_dist(x + i * d, c.data() + at, d));
  }
  return c;
}

double assign(const double* x, std::size_t n, std::size_t d, const std::vector<double>& c, std::size_t k,
              std::vector<std::size_t>& out, std::vector<double>& dist) {
  double obj = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      const double v = sq_dist(x + i * d, c.data() + j * d, d);
      if (v < bd) bd = v, best = j;
    }
    out[i] = best;
    dist[i] = bd;
    obj += bd;
  }
  return obj;
}

Run lloyd(const double* x, std::size_t n, std::size_t d, std::size_t k, Rng& rng, std::size_t max_iter) {
  Run r;
  r.centroids = seed_centres(x, n, d, k, rng);
  std::vector<std::size_t> prev(n, k), cur(n);
  std::vector<double> dist(n);
  bool converged = false;
  for (std::size_t it = 0; it < max_iter; ++it) {
    r.objective = assign(x, n, d, r.centroids, k, cur, dist);
    r.history.push_back(r.objective);
    r.iterations = it + 1;
    if (cur == prev) {
      converged = true;
      break;
    }
    prev = cur;
    std::vector<double> sum(k * d, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[cur[i]];
      for (std::size_t j = 0; j < d; ++j) sum[cur[i] * d + j] += x[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) {
        // Empty cluster: move it onto the point worst served by its centre.
        const std::size_t far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        std::copy(x + far * d, x + (far + 1) * d, r.centroids.begin() + c * d);
        dist[far] = 0;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) r.centroids[c * d + j] = sum[c * d + j] / static_cast<double>(count[c]);
    }
  }
  if (!converged) {
    r.objective = assign(x, n, d, r.centroids, k, cur, dist);
    r.history.push_back(r.objective);
  }
  r.assignment = std::move(cur);
  return r;
}

}  // namespace

KMeansResult kmeans(std::span<const double> points, std::size_t dim, std::size_t K, std::uint64_t seed,
                    const KMeansOptions& options) {
  if (dim == 0 || points.size() % dim != 0) throw DimensionError("point buffer is not a whole number of rows");
  const std::size_t n = points.size() / dim;
  if (n == 0) throw DataError("k-means needs at least one point");
  if (K == 0) throw ConfigError("k-means needs K >= 1");
  for (double v : points)
    if (!std::isfinite(v)) throw NumericError("k-means input contains a non-finite value");
  KMeansResult out;
  if (K > n) {
    out.warnings.push_back("K reduced from " + std::to_string(K) + " to " + std::to_string(n) +
                           " (number of points)");
    K = n;
  }
  Run best;
  bool have = false;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, options.n_init); ++r) {
    Rng rng(derive_seed(seed, r));
    auto run = lloyd(points.data(), n, dim, K, rng, std::max<std::size_t>(1, options.max_iterations));
    if (!have || run.objective < best.objective) {
      best = std::move(run);
      have = true;
    }
  }
  out.k = K;
  out.dim = dim;
  out.centroids = std::move(best.centroids);
  out.assignment = std::move(best.assignment);
  out.objective = best.objective;
  out.iterations = best.iterations;
  out.history = std::move(best.history);
  return out;
}

template <typename T>
PrototypeSet build_prototypes(const SampleSource& data, const BackboneParams<T>& backbone, std::size_t K,
                              std::uint64_t seed) {
  if (!backbone.frozen) throw ConfigError("prototypes require a frozen backbone");
  if (data.size() == 0) throw DataError("cannot build prototypes from an empty source");
  Tensor<T> emb;
  {
    NoGradScope<T> no_grad;
    emb = class_embedding(backbone, encode_samples(backbone, data, false));
  }
  std::vector<double> pts(emb.values().begin(), emb.values().end());
  auto km = kmeans(pts, emb.cols(), K, seed);
  PrototypeSet p;
  p.k = km.k;
  p.dim = km.dim;
  p.centroids = std::move(km.centroids);
  p.built_from = backbone.fingerprint();
  p.warnings = std::move(km.warnings);
  return p;
}

double min_distance(std::span<const double> embedding, const PrototypeSet& prototypes) {
  if (embedding.size() != prototypes.dim)
    throw DimensionError("embedding has " + std::to_string(embedding.size()) + " dims, prototypes " +
                         std::to_string(prototypes.dim));
  if (prototypes.k == 0) throw ConfigError("prototype set is empty");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < prototypes.k; ++k)
    best = std::min(best, sq_dist(embedding.data(), prototypes.centroid(k).data(), prototypes.dim));
  return std::sqrt(best);
}

std::vector<double> source_weights(std::span<const double> distances, double beta) {
  if (!(beta >= 0)) throw ConfigError("beta must be non-negative");
  if (distances.empty()) return {};
  const double lo = *std::min_element(distances.begin(), distances.end());
  std::vector<double> w(distances.size());
  double sum = 0;
  for (std::size_t i = 0; i < w.size(); ++i) sum += w[i] = std::exp(-beta * (distances[i] - lo));
  for (auto& x : w) x /= sum;
  return w;
}

template <typename T>
std::vector<double> selection_weights(const SelectionOutput<T>& out, const std::vector<const PrototypeSet*>& protos,
                                      double beta) {
  if (protos.size() != out.logits.size()) throw ConfigError("expected one prototype set per selected source");
  const std::size_t k = protos.size(), d = out.class_embedding.cols();
  std::vector<double> w(out.batch * k), dist(k), emb(d);
  for (std::size_t i = 0; i < out.batch; ++i) {
    for (std::size_t j = 0; j < d; ++j) emb[j] = static_cast<double>(out.class_embedding[i * d + j]);
    for (std::size_t s = 0; s < k; ++s) dist[s] = min_distance(emb, *protos[s]);
    const auto row = source_weights(dist, beta);
    std::copy(row.begin(), row.end(), w.begin() + i * k);
  }
  return w;
}

template <typename T>
ScoreMatrix weighted_scores(const SelectionOutput<T>& out, const std::vector<const PrototypeSet*>& protos,
                            std::size_t n_classes, const WeightingConfig& config) {
  const auto w = selection_weights(out, protos, config.beta);
  const std::size_t k = out.logits.size();
  SelectionOutput<double> scaled;
  scaled.batch = out.batch;
  scaled.ids = out.ids;
  scaled.label_maps = out.label_maps;
  for (std::size_t s = 0; s < k; ++s) {
    const std::size_t c = out.logits[s].cols();
    std::vector<double> v(out.batch * c);
    for (std::size_t i = 0; i < out.batch; ++i) {
      double m = -std::numeric_limits<double>::infinity(), sum = 0;
      if (config.weight_probabilities) {
        for (std::size_t j = 0; j < c; ++j) m = std::max(m, static_cast<double>(out.logits[s][i * c + j]));
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(out.logits[s][i * c + j]) - m);
      }
      for (std::size_t j = 0; j < c; ++j) {
        const double z = static_cast<double>(out.logits[s][i * c + j]);
        v[i * c + j] = w[i * k + s] * (config.weight_probabilities ? std::exp(z - m) / sum : z);
      }
    }
    scaled.logits.emplace_back(Shape{out.batch, c}, std::move(v));
  }
  if (config.mode == WeightingMode::cil) return concat_logits(scaled, n_classes);
  auto m = average_logits(scaled, n_classes);
  if (config.weight_probabilities)
    for (auto& x : m.values) x *= static_cast<double>(k);  // weights already sum to one
  return m;
}

template <typename T>
std::vector<const PrototypeSet*> selected_prototypes(const PromptSource<T>& pool, const std::vector<std::string>& ids) {
  std::vector<const PrototypeSet*> out;
  for (const auto& id : ids) {
    const auto& s = pool.get(id);
    if (!s.prototypes) throw ConfigError("source '" + id + "' has no prototypes");
    out.push_back(&*s.prototypes);
  }
  return out;
}

template <typename T>
ScoreMatrix aptw_predict(const BackboneParams<T>& backbone, const Tensor<T>& patches, std::size_t batch,
                         const PromptSource<T>& pool, const std::vector<std::string>& ids,
                         const WeightingConfig& config) {
  const auto out = select_and_forward(backbone, patches, batch, pool, ids);
  return weighted_scores(out, selected_prototypes(pool, ids), pool.n_classes(), config);
}

#define APT_INSTANTIATE_APTW(T)                                                                              \
  template PrototypeSet build_prototypes<T>(const SampleSource&, const BackboneParams<T>&, std::size_t,      \
                                            std::uint64_t);                                                  \
  template std::vector<double> selection_weights<T>(const SelectionOutput<T>&,                               \
                                                    const std::vector<const PrototypeSet*>&, double);        \
  template ScoreMatrix weighted_scores<T>(const SelectionOutput<T>&, const std::vector<const PrototypeSet*>&, \
                                          std::size_t, const WeightingConfig&);                              \
  template std::vector<const PrototypeSet*> selected_prototypes<T>(const PromptSource<T>&,                   \
                                                                   const std::vector<std::string>&);         \
  template ScoreMatrix aptw_predict<T>(const BackboneParams<T>&, const Tensor<T>&, std::size_t,              \
                                       const PromptSource<T>&, const std::vector<std::string>&,              \
                                       const WeightingConfig&);

APT_INSTANTIATE_APTW(float)
APT_INSTANTIATE_APTW(double)

#undef APT_INSTANTIATE_APTW

}  // namespace apt
