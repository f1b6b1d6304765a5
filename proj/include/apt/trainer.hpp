// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors
//
// Optimizer, learning-rate schedule and the training loops: prompt tuning
// (structured or full attention), head-only, bias+head, full finetuning and
// the proxy pretraining of the backbone.

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "apt/datasets.hpp"
#include "apt/json_io.hpp"
#include "apt/prompt.hpp"
#include "apt/vit.hpp"

namespace apt {

struct ScheduleSpec {
  double start_lr = 1e-5;
  double base_lr = 1e-1;
  double min_lr = 1e-6;
  double warmup_epochs = 1;
  double total_epochs = 20;
  std::size_t steps_per_epoch = 1;
  std::size_t batch_size = 8;
  std::size_t n_devices = 1;

  /// base_lr * batch_size * n_devices / 256.
  double effective_base() const;
  double warmup_steps() const { return warmup_epochs * static_cast<double>(steps_per_epoch); }
  double total_steps() const { return total_epochs * static_cast<double>(steps_per_epoch); }
  /// Throws ConfigError unless min_lr <= start_lr <= effective base and
  /// warmup_epochs < total_epochs.
  void validate() const;
};

/// Linear warmup from start_lr to the effective base over the warmup steps,
/// then cosine annealing down to min_lr, reached at the last step
/// (total_steps - 1). Later steps stay at min_lr.
double lr_at(const ScheduleSpec& s, double step);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.02;
};

template <typename T>
struct OptimState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::size_t step = 0;
};

/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + lambda * theta).
/// A parameter without a gradient is treated as having a zero gradient.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedTensor<T>> params, AdamWConfig config = {});

  /// Throws NumericError naming the parameter when a gradient is not finite.
  void step(double lr);
  void zero_grad();

  const OptimState<T>& state() const { return state_; }
  const std::vector<NamedTensor<T>>& params() const { return params_; }

 private:
  std::vector<NamedTensor<T>> params_;
  AdamWConfig config_;
  OptimState<T> state_;
};

// ---------------------------------------------------------------------------

enum class Regime { prompt, head_only, bias_head, finetune, pretrain };

std::string to_string(Regime r);
Regime parse_regime(const std::string& name);

struct TrainConfig {
  Regime regime = Regime::prompt;
  std::size_t epochs = 20;
  double warmup_epochs = 1;
  std::size_t batch_size = 8;
  std::size_t n_devices = 1;
  double start_lr = 1e-5;
  double base_lr = 1e-1;
  double min_lr = 1e-6;
  double weight_decay = 0.02;
  std::uint64_t seed = 0;
  PromptShape prompt;
  bool augment_flip = false;
  /// Train the prompt with every token attending every other token, memory
  /// included (the paragon without structured attention).
  bool full_attention = false;

  /// Defaults per regime (learning rate and epochs).
  static TrainConfig defaults(Regime regime);
  ScheduleSpec schedule(std::size_t n_samples) const;
  void validate() const;
};

void to_json(Json& j, const TrainConfig& c);
/// Keys absent from `j` keep the regime defaults.
void from_json(const Json& j, TrainConfig& c);

struct TrainLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0;
  double train_loss = 0;
  double eval_acc = -1;  // negative when no evaluation set was given
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  void write_csv(std::ostream& out) const;
};

/// Optional evaluation after each epoch; returns accuracy in [0, 1].
using EpochEval = std::function<double()>;

// ---------------------------------------------------------------------------

/// Phase-1 output for every sample of a source, computed in chunks without
/// recording gradients. Layer inputs are dropped; keys, values and z_L are
/// kept (the per-layer caches are skipped when `keep_layers` is false).
template <typename T>
BackboneOutput<T> encode_samples(const BackboneParams<T>& backbone, const SampleSource& data,
                                 bool keep_layers, bool flip = false, std::size_t chunk = 64);

/// Optimizes only the prompt, memory and head of a new source against a
/// frozen backbone. Throws DataError on an empty source and ConfigError when
/// the backbone is not frozen.
template <typename T>
SourcePromptSet<T> train_prompt(const SampleSource& data, const BackboneParams<T>& backbone,
                                std::vector<int> label_map, std::string id, const TrainConfig& config,
                                TrainLog* log = nullptr, const EpochEval& eval = {});

/// Continues training an existing prompt set in place.
template <typename T>
void fit_prompt(SourcePromptSet<T>& source, const SampleSource& data, const BackboneParams<T>& backbone,
                const TrainConfig& config, TrainLog* log = nullptr, const EpochEval& eval = {});

/// A linear head on final_norm(z_L^(0)).
template <typename T>
struct HeadModel {
  LinearParams<T> head;
  std::vector<int> label_map;
};

template <typename T>
HeadModel<T> train_head_only(const SampleSource& data, const BackboneParams<T>& backbone,
                             std::vector<int> label_map, const TrainConfig& config, TrainLog* log = nullptr);

/// A private backbone copy plus head.
template <typename T>
struct FinetunedModel {
  BackboneParams<T> backbone;
  LinearParams<T> head;
  std::vector<int> label_map;
};

/// Trains every bias vector of a private backbone copy plus the head.
template <typename T>
FinetunedModel<T> train_bias_head(const SampleSource& data, const BackboneParams<T>& backbone,
                                  std::vector<int> label_map, const TrainConfig& config,
                                  TrainLog* log = nullptr);

/// Trains all parameters of a private backbone copy plus the head; the
/// shared backbone is never modified.
template <typename T>
FinetunedModel<T> finetune_full(const SampleSource& data, const BackboneParams<T>& backbone,
                                std::vector<int> label_map, const TrainConfig& config,
                                TrainLog* log = nullptr);

/// Trains a freshly initialized backbone and a throwaway head on a proxy
/// task; returns the backbone frozen, head discarded.
BackboneParams<float> pretrain_proxy(const SampleSource& data, const BackboneConfig& config,
                                     const TrainConfig& train, TrainLog* log = nullptr,
                                     const std::function<double(const BackboneParams<float>&,
                                                                const LinearParams<float>&)>& eval = {});

/// Softmax of head(final_norm(z_L^(0))) under the model's own backbone.
template <typename T>
Tensor<T> predict_finetuned(const FinetunedModel<T>& model, const Tensor<T>& patches, std::size_t batch);

}  // namespace apt
