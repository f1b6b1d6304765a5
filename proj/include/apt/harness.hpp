// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors
//
// Experiment scenarios run end to end: uniform sharding sweeps, forgetting
// curves, class- and domain-incremental episodes and the composition
// benchmark. Each returns an ExperimentReport (CSV rows plus a summary).

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "apt/aptw.hpp"
#include "apt/composition.hpp"
#include "apt/datasets.hpp"
#include "apt/json_io.hpp"
#include "apt/trainer.hpp"

namespace apt {

/// Where a corpus comes from. Synthetic corpora are regenerated per
/// experiment seed (derive_seed(synthetic.seed, seed)).
struct DataSpec {
  enum class Kind { synthetic, cifar10, cifar100 };
  Kind kind = Kind::synthetic;
  SyntheticSpec synthetic;
  std::size_t test_samples_per_class = 20;
  std::filesystem::path train_path;
  std::filesystem::path test_path;
};

struct Corpus {
  LabeledImageSet train;
  LabeledImageSet test;
};

Corpus load_corpus(const DataSpec& spec, std::uint64_t seed);

enum class Method {
  apt,                 // probability average over structured-attention prompts
  apt_logits,          // logit average (DIL)
  apt_w,               // prototype-weighted logits
  majority_vote,
  param_average,       // one prompt with averaged parameters
  naive_concat,        // isolated prompts run together under full attention
  finetune_ensemble,   // per-source full finetuning, probabilities averaged
  head_only_ensemble,  // per-source linear heads, probabilities averaged
  paragon,             // one prompt on the union of the sources
  paragon_full,        // same, trained and evaluated with full attention
};

std::string to_string(Method m);
Method parse_method(const std::string& name);

struct ExperimentConfig {
  BackboneConfig backbone;
  /// Load the backbone from this checkpoint instead of pretraining it.
  std::filesystem::path backbone_path;
  DataSpec proxy;       // pretraining corpus
  TrainConfig pretrain = TrainConfig::defaults(Regime::pretrain);
  DataSpec data;        // downstream corpus
  TrainConfig prompt = TrainConfig::defaults(Regime::prompt);
  TrainConfig paragon = TrainConfig::defaults(Regime::prompt);
  TrainConfig finetune = TrainConfig::defaults(Regime::finetune);
  TrainConfig head_only = TrainConfig::defaults(Regime::head_only);
  std::vector<std::size_t> shard_counts{1, 2, 4, 8};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<Method> methods{Method::apt,          Method::majority_vote,     Method::param_average,
                              Method::naive_concat, Method::finetune_ensemble, Method::head_only_ensemble};
  std::size_t forget_sources = 10;
  std::size_t n_episodes = 5;
  /// Domains of the synthetic corpus generated for domain-incremental runs.
  std::size_t dil_domains = 5;
  std::vector<int> train_domains{0, 1, 2, 3};
  PoolDefaults prototypes;
  std::vector<std::size_t> bench_sizes{0, 1, 2, 4, 8, 16, 32};
  std::size_t bench_batch = 16;
  std::size_t bench_repeats = 3;
  std::size_t workers = 1;
  /// Record wall-clock times; off by default so reports are byte-reproducible.
  bool timing = false;

  /// Desk-scale defaults: paragon trained 40 epochs, prompts 20; a noisy
  /// 10-class corpus with 30 training images per class; a proxy corpus from
  /// the same generator family (disjoint draws) for pretraining.
  static ExperimentConfig defaults();
  /// Throws ConfigError on inconsistent settings (including a paragon
  /// trained for fewer epochs than the sources).
  void validate() const;
};

void to_json(Json& j, const ExperimentConfig& c);
/// Missing keys keep the defaults; unknown keys are a ConfigError.
void from_json(const Json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct ReportRow {
  std::string scenario;
  std::uint64_t seed = 0;
  std::string group;   // shard count, episode, removal step or |I|
  std::string method;
  double accuracy = -1;  // negative when not applicable
  double wall_ms = 0;
  double flops = 0;
};

struct ReportAggregate {
  std::string group;
  std::string method;
  std::size_t n = 0;
  double mean = 0;
  double std = 0;  // sample standard deviation; 0 for a single row
};

struct ExperimentReport {
  std::string scenario;
  Json config;
  std::vector<ReportRow> rows;
  std::vector<std::string> notes;  // free-form summary lines

  /// Mean and standard deviation of accuracy per (group, method), in first-appearance order.
  std::vector<ReportAggregate> aggregate() const;
  /// Mean accuracy of `method`, over all rows or over one group.
  double mean(const std::string& method, const std::optional<std::string>& group = std::nullopt) const;

  /// Header: scenario,seed,group,method,accuracy,wall_ms,flops.
  void write_csv(std::ostream& out) const;
  void write_summary(std::ostream& out) const;
  /// report.csv, summary.txt and config.json under `dir`.
  void save(const std::filesystem::path& dir) const;
};

/// Formats a double with the shortest round-trip representation, independent of locale.
std::string format_number(double v);

/// Runs fn(0..n-1) on up to `workers` threads. Exceptions are rethrown
/// (the one from the lowest index) after all jobs finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// Loads config.backbone_path, or pretrains on the proxy corpus. Progress
/// lines go to `log` when given.
BackboneParams<float> obtain_backbone(const ExperimentConfig& config, std::ostream* log = nullptr);

template <typename T>
ExperimentReport shard_sweep(const BackboneParams<T>& backbone, const ExperimentConfig& config,
                             std::ostream* log = nullptr);

/// Builds a pool of config.forget_sources shard prompts under `pool_dir`,
/// then removes them one at a time in a seeded order, evaluating after each
/// removal. Every step checks that the removed bytes are gone from disk and
/// that predictions equal those of a pool built without the removed sources
/// (PoolError otherwise).
template <typename T>
ExperimentReport forget_curve(const BackboneParams<T>& backbone, const ExperimentConfig& config,
                              const std::filesystem::path& pool_dir, std::ostream* log = nullptr);

template <typename T>
ExperimentReport class_incremental(const BackboneParams<T>& backbone, const ExperimentConfig& config,
                                   std::ostream* log = nullptr);

template <typename T>
ExperimentReport domain_incremental(const BackboneParams<T>& backbone, const ExperimentConfig& config,
                                    std::ostream* log = nullptr);

/// Analytic FLOPs for composed, naive-concatenation and per-model ensemble
/// inference over |I| in bench_sizes, plus measured wall time of the first
/// two. Notes carry the R^2 of a linear fit of composed FLOPs in |I|.
template <typename T>
ExperimentReport bench_compose(const BackboneParams<T>& backbone, const ExperimentConfig& config,
                               std::ostream* log = nullptr);

/// Coefficient of determination of the least-squares line through (x, y).
double linear_fit_r2(std::span<const double> x, std::span<const double> y);

/// Predictions of a set of prompts on a whole image set, computed in chunks.
template <typename T>
SelectionOutput<T> evaluate_selection(const BackboneParams<T>& backbone, const LabeledImageSet& set,
                                      const PromptSource<T>& pool, const std::vector<std::string>& ids,
                                      std::size_t chunk = 256);

}  // namespace apt
