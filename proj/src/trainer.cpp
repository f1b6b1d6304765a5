// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include "apt/trainer.hpp"

#include <charconv>
#include <cmath>
#include <numbers>
#include <ostream>

#include "apt/errors.hpp"
#include "apt/random.hpp"

namespace apt {

double ScheduleSpec::effective_base() const {
  return base_lr * static_cast<double>(batch_size * n_devices) / 256.0;
}

void ScheduleSpec::validate() const {
  if (batch_size == 0 || n_devices == 0 || steps_per_epoch == 0)
    throw ConfigError("batch_size, n_devices and steps_per_epoch must be positive");
  if (!(min_lr <= start_lr && start_lr <= effective_base()))
    throw ConfigError("schedule requires min_lr <= start_lr <= effective base lr (got " +
                      std::to_string(min_lr) + ", " + std::to_string(start_lr) + ", " +
                      std::to_string(effective_base()) + ")");
  if (!(warmup_epochs >= 0 && warmup_epochs < total_epochs))
    throw ConfigError("warmup_epochs must be in [0, total_epochs)");
}

double lr_at(const ScheduleSpec& s, double step) {
  const double base = s.effective_base();
  const double warmup = s.warmup_steps();
  const double last = s.total_steps() - 1.0;
  if (step <= 0.0) return warmup > 0.0 ? s.start_lr : (last > 0.0 ? base : s.min_lr);
  if (step < warmup) return s.start_lr + (base - s.start_lr) * step / warmup;
  if (step >= last) return s.min_lr;
  const double t = (step - warmup) / (last - warmup);
  return s.min_lr + 0.5 * (base - s.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
AdamW<T>::AdamW(std::vector<NamedTensor<T>> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& [name, t] : params_) {
    state_.m.emplace_back(t.numel(), T(0));
    state_.v.emplace_back(t.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (auto& [name, t] : params_)
    if (t.has_grad())
      for (T g : t.grad())
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
  ++state_.step;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    auto& t = params_[p].second;
    auto& m = state_.m[p];
    auto& v = state_.v[p];
    const bool has = t.has_grad();
    T* w = t.data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double g = has ? static_cast<double>(t.grad()[i]) : 0.0;
      m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g);
      v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g * g);
      const double mh = m[i] / c1, vh = v[i] / c2;
      w[i] = static_cast<T>(w[i] - lr * (mh / (std::sqrt(vh) + config_.eps) + config_.weight_decay * w[i]));
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

// ---------------------------------------------------------------------------

std::string to_string(Regime r) {
  switch (r) {
    case Regime::prompt: return "prompt";
    case Regime::head_only: return "head_only";
    case Regime::bias_head: return "bias_head";
    case Regime::finetune: return "finetune";
    case Regime::pretrain: return "pretrain";
  }
  return "prompt";
}

Regime parse_regime(const std::string& name) {
  for (auto r : {Regime::prompt, Regime::head_only, Regime::bias_head, Regime::finetune, Regime::pretrain})
    if (to_string(r) == name) return r;
  throw ConfigError("unknown training regime '" + name + "'");
}

TrainConfig TrainConfig::defaults(Regime regime) {
  TrainConfig c;
  c.regime = regime;
  switch (regime) {
    case Regime::prompt: c.base_lr = 1e-1; break;
    case Regime::head_only: c.base_lr = 5e-1; break;
    case Regime::bias_head: c.base_lr = 5e-3; break;
    case Regime::finetune: c.base_lr = 1e-1; break;
    case Regime::pretrain:
      c.base_lr = 1e-2;
      c.batch_size = 32;
      c.epochs = 30;
      break;
  }
  return c;
}

ScheduleSpec TrainConfig::schedule(std::size_t n_samples) const {
  ScheduleSpec s;
  s.start_lr = start_lr;
  s.base_lr = base_lr;
  s.min_lr = min_lr;
  s.warmup_epochs = warmup_epochs;
  s.total_epochs = static_cast<double>(epochs);
  s.batch_size = batch_size;
  s.n_devices = n_devices;
  s.steps_per_epoch = std::max<std::size_t>(1, (n_samples + batch_size - 1) / std::max<std::size_t>(1, batch_size));
  return s;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (prompt.n_tokens == 0) throw ConfigError("n_prompt_tokens must be positive");
  if (epochs > 0) schedule(1).validate();
}

void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"regime", to_string(c.regime)},
           {"epochs", c.epochs},
           {"warmup_epochs", c.warmup_epochs},
           {"batch_size", c.batch_size},
           {"n_devices", c.n_devices},
           {"start_lr", c.start_lr},
           {"base_lr", c.base_lr},
           {"min_lr", c.min_lr},
           {"weight_decay", c.weight_decay},
           {"seed", c.seed},
           {"variant", to_string(c.prompt.variant)},
           {"n_prompt_tokens", c.prompt.n_tokens},
           {"d_mem", c.prompt.d_mem},
           {"augment_flip", c.augment_flip},
           {"full_attention", c.full_attention}};
}

void from_json(const Json& j, TrainConfig& c) {
  reject_unknown_keys(j,
                      {"regime", "epochs", "warmup_epochs", "batch_size", "n_devices", "start_lr", "base_lr",
                       "min_lr", "weight_decay", "seed", "variant", "n_prompt_tokens", "d_mem", "augment_flip",
                       "full_attention"},
                      "training config");
  std::string regime = to_string(c.regime);
  read_optional(j, "regime", regime);
  if (j.contains("regime")) c = TrainConfig::defaults(parse_regime(regime));
  read_optional(j, "epochs", c.epochs);
  read_optional(j, "warmup_epochs", c.warmup_epochs);
  read_optional(j, "batch_size", c.batch_size);
  read_optional(j, "n_devices", c.n_devices);
  read_optional(j, "start_lr", c.start_lr);
  read_optional(j, "base_lr", c.base_lr);
  read_optional(j, "min_lr", c.min_lr);
  read_optional(j, "weight_decay", c.weight_decay);
  read_optional(j, "seed", c.seed);
  std::string variant = to_string(c.prompt.variant);
  read_optional(j, "variant", variant);
  c.prompt.variant = parse_variant(variant);
  read_optional(j, "n_prompt_tokens", c.prompt.n_tokens);
  read_optional(j, "d_mem", c.prompt.d_mem);
  read_optional(j, "augment_flip", c.augment_flip);
  read_optional(j, "full_attention", c.full_attention);
  c.validate();
}

namespace {

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

void TrainLog::write_csv(std::ostream& out) const {
  out << "epoch,step,lr,train_loss,eval_acc\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << r.step << ',' << fmt(r.lr) << ',' << fmt(r.train_loss) << ','
        << (r.eval_acc < 0 ? std::string() : fmt(r.eval_acc)) << '\n';
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::uint8_t> flipped(std::span<const std::uint8_t> img, int size, int channels) {
  std::vector<std::uint8_t> out(img.size());
  const std::size_t w = static_cast<std::size_t>(size), c = static_cast<std::size_t>(channels);
  for (std::size_t y = 0; y < w; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) out[(y * w + x) * c + k] = img[(y * w + (w - 1 - x)) * c + k];
  return out;
}

template <typename T>
Tensor<T> patch_batch(const SampleSource& data, std::span<const std::size_t> idx, const BackboneConfig& config,
                      const std::vector<bool>* flip = nullptr) {
  ImageBatch batch;
  std::vector<std::vector<std::uint8_t>> storage;
  storage.reserve(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (flip && (*flip)[j]) {
      storage.push_back(flipped(data.image(idx[j]), config.image_size, config.channels));
      batch.emplace_back(storage.back());
    } else {
      batch.push_back(data.image(idx[j]));
    }
  }
  return patchify<T>(batch, config);
}

std::vector<int> local_labels(const SampleSource& data, std::span<const int> label_map) {
  std::vector<int> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out[i] = local_label(label_map, data.label(i));
  return out;
}

template <typename T>
LinearParams<T> init_head(std::size_t classes, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> w(Shape{classes, d}, true);
  for (auto& x : w.values()) x = static_cast<T>(rng.truncated_normal(0.02));
  return {w, Tensor<T>(Shape{classes}, true)};
}

// Shared minibatch loop. `loss_fn(indices, epoch, batch_in_epoch)` must build
// the loss on the active tape.
template <typename T, typename LossFn>
void run_epochs(std::size_t n, const TrainConfig& config, AdamW<T>& opt, LossFn&& loss_fn, TrainLog* log,
                const EpochEval& eval) {
  if (n == 0) throw DataError("cannot train on an empty source");
  config.validate();
  if (config.epochs == 0) return;
  const auto sched = config.schedule(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto perm = Rng(derive_seed(config.seed, 1000 + epoch)).permutation(n);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    double lr = 0.0;
    for (std::size_t at = 0; at < n; at += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, n - at);
      const std::span<const std::size_t> idx(perm.data() + at, len);
      GradTape<T> tape;
      Tensor<T> loss;
      {
        TapeScope<T> scope(tape);
        loss = loss_fn(idx, epoch, batches);
      }
      tape.backward(loss);
      lr = lr_at(sched, static_cast<double>(step));
      opt.step(lr);
      opt.zero_grad();
      loss_sum += static_cast<double>(loss.item());
      ++batches;
      ++step;
    }
    if (log) log->rows.push_back({epoch, step - 1, lr, loss_sum / static_cast<double>(batches), eval ? eval() : -1.0});
  }
}

template <typename T>
std::vector<NamedTensor<T>> trainable(const SourcePromptSet<T>& s) {
  auto ps = s.parameters();
  for (auto& [name, t] : ps) t.set_requires_grad(true);
  return ps;
}

}  // namespace

template <typename T>
BackboneOutput<T> encode_samples(const BackboneParams<T>& backbone, const SampleSource& data, bool keep_layers,
                                 bool flip, std::size_t chunk) {
  NoGradScope<T> no_grad;
  BackboneOutput<T> out;
  out.batch = data.size();
  std::vector<Tensor<T>> tokens;
  std::vector<std::vector<Tensor<T>>> keys(backbone.blocks.size()), values(backbone.blocks.size());
  for (std::size_t at = 0; at < data.size(); at += chunk) {
    const std::size_t len = std::min(chunk, data.size() - at);
    std::vector<std::size_t> idx(len);
    for (std::size_t j = 0; j < len; ++j) idx[j] = at + j;
    std::vector<bool> flips(len, flip);
    const auto patches = patch_batch<T>(data, idx, backbone.config, &flips);
    auto part = forward_backbone(backbone, patches, len, keep_layers);
    tokens.push_back(part.tokens);
    for (std::size_t l = 0; l < part.layers.size(); ++l) {
      keys[l].push_back(part.layers[l].keys);
      values[l].push_back(part.layers[l].values);
    }
  }
  if (tokens.empty()) return out;
  out.tokens = tokens.size() == 1 ? tokens[0] : concat(tokens, 0);
  if (keep_layers)
    for (std::size_t l = 0; l < backbone.blocks.size(); ++l) {
      LayerKV<T> kv;
      kv.keys = keys[l].size() == 1 ? keys[l][0] : concat(keys[l], 0);
      kv.values = values[l].size() == 1 ? values[l][0] : concat(values[l], 0);
      out.layers.push_back(std::move(kv));
    }
  return out;
}

template <typename T>
void fit_prompt(SourcePromptSet<T>& source, const SampleSource& data, const BackboneParams<T>& backbone,
                const TrainConfig& config, TrainLog* log, const EpochEval& eval) {
  if (!backbone.frozen) throw ConfigError("prompt training requires a frozen backbone");
  if (data.size() == 0) throw DataError("cannot train prompt '" + source.source_id + "' on an empty source");
  const auto labels = local_labels(data, source.label_map);
  const std::size_t n = data.size(), S = backbone.config.seq_len();
  AdamW<T> opt(trainable(source), {.weight_decay = config.weight_decay});
  std::vector<int> batch_labels;
  Rng flip_rng(derive_seed(config.seed, 77));

  auto head_loss = [&](const Tensor<T>& p_last, std::span<const std::size_t> idx) {
    batch_labels.clear();
    for (auto i : idx) batch_labels.push_back(labels[i]);
    const auto logits = predict_source(prompt_features(backbone, p_last, idx.size()), source.head, false);
    return cross_entropy(logits, std::span<const int>(batch_labels));
  };

  if (config.full_attention) {
    const SourceList<T> one{&source};
    run_epochs<T>(n, config, opt,
                  [&](std::span<const std::size_t> idx, std::size_t, std::size_t) {
                    std::vector<bool> flips(idx.size(), false);
                    if (config.augment_flip)
                      for (std::size_t j = 0; j < idx.size(); ++j) flips[j] = flip_rng.below(2) == 1;
                    const auto patches = patch_batch<T>(data, idx, backbone.config, &flips);
                    const auto out = reference_forward(backbone, patches, idx.size(), one, AttentionLayout::full);
                    return head_loss(out.prompts[0], idx);
                  },
                  log, eval);
    return;
  }

  require_fingerprints<T>(backbone, {&source});
  const auto cache = encode_samples(backbone, data, true);
  BackboneOutput<T> both;
  if (config.augment_flip) {
    // Plain rows first, then their mirrored copies.
    const auto flip = encode_samples(backbone, data, true, true);
    both.batch = 2 * n;
    for (std::size_t l = 0; l < cache.layers.size(); ++l)
      both.layers.push_back({Tensor<T>{}, concat(std::vector<Tensor<T>>{cache.layers[l].keys, flip.layers[l].keys}, 0),
                             concat(std::vector<Tensor<T>>{cache.layers[l].values, flip.layers[l].values}, 0)});
  }
  std::vector<std::size_t> rows;
  run_epochs<T>(n, config, opt,
                [&](std::span<const std::size_t> idx, std::size_t, std::size_t) {
                  BackboneOutput<T> sub;
                  if (config.augment_flip) {
                    rows.clear();
                    for (auto i : idx) rows.push_back(flip_rng.below(2) == 1 ? n + i : i);
                    sub = gather_cache(both, rows, S);
                  } else {
                    sub = gather_cache(cache, idx, S);
                  }
                  return head_loss(prompt_forward(backbone, sub, source), idx);
                },
                log, eval);
}

template <typename T>
SourcePromptSet<T> train_prompt(const SampleSource& data, const BackboneParams<T>& backbone,
                                std::vector<int> label_map, std::string id, const TrainConfig& config,
                                TrainLog* log, const EpochEval& eval) {
  if (data.size() == 0) throw DataError("cannot train prompt '" + id + "' on an empty source");
  auto source = SourcePromptSet<T>::init(std::move(id), config.prompt, backbone.config, std::move(label_map),
                                         backbone.fingerprint(), derive_seed(config.seed, 7));
  fit_prompt(source, data, backbone, config, log, eval);
  return source;
}

template <typename T>
HeadModel<T> train_head_only(const SampleSource& data, const BackboneParams<T>& backbone, std::vector<int> label_map,
                             const TrainConfig& config, TrainLog* log) {
  if (data.size() == 0) throw DataError("cannot train a head on an empty source");
  const auto labels = local_labels(data, label_map);
  Tensor<T> feats;
  {
    const auto enc = encode_samples(backbone, data, false);
    NoGradScope<T> no_grad;
    feats = class_embedding(backbone, enc);
  }
  HeadModel<T> model{init_head<T>(label_map.size(), backbone.config.width(), derive_seed(config.seed, 9)),
                     std::move(label_map)};
  AdamW<T> opt({{"head.weight", model.head.weight}, {"head.bias", model.head.bias}},
               {.weight_decay = config.weight_decay});
  std::vector<int> batch_labels;
  run_epochs<T>(data.size(), config, opt,
                [&](std::span<const std::size_t> idx, std::size_t, std::size_t) {
                  batch_labels.clear();
                  for (auto i : idx) batch_labels.push_back(labels[i]);
                  const auto logits = linear(select_rows(feats, idx), model.head.weight, model.head.bias);
                  return cross_entropy(logits, std::span<const int>(batch_labels));
                },
                log, {});
  return model;
}

namespace {

template <typename T>
void train_backbone_and_head(FinetunedModel<T>& model, const SampleSource& data, const TrainConfig& config,
                             bool biases_only, TrainLog* log, const EpochEval& eval = {}) {
  const auto labels = local_labels(data, model.label_map);
  std::vector<NamedTensor<T>> params;
  for (auto& [name, t] : model.backbone.named_parameters()) {
    const bool train = !biases_only || name.ends_with(".bias");
    t.set_requires_grad(train);
    if (train) params.emplace_back(name, t);
  }
  model.backbone.frozen = false;
  model.backbone.frozen_fingerprint.clear();
  params.emplace_back("head.weight", model.head.weight);
  params.emplace_back("head.bias", model.head.bias);
  AdamW<T> opt(params, {.weight_decay = config.weight_decay});
  Rng flip_rng(derive_seed(config.seed, 78));
  std::vector<int> batch_labels;
  run_epochs<T>(data.size(), config, opt,
                [&](std::span<const std::size_t> idx, std::size_t, std::size_t) {
                  std::vector<bool> flips(idx.size(), false);
                  if (config.augment_flip)
                    for (std::size_t j = 0; j < idx.size(); ++j) flips[j] = flip_rng.below(2) == 1;
                  const auto patches = patch_batch<T>(data, idx, model.backbone.config, &flips);
                  const auto out = forward_backbone(model.backbone, patches, idx.size(), false);
                  const auto logits = linear(class_embedding(model.backbone, out), model.head.weight, model.head.bias);
                  batch_labels.clear();
                  for (auto i : idx) batch_labels.push_back(labels[i]);
                  return cross_entropy(logits, std::span<const int>(batch_labels));
                },
                log, eval);
  model.backbone.freeze();
}

}  // namespace

template <typename T>
FinetunedModel<T> train_bias_head(const SampleSource& data, const BackboneParams<T>& backbone,
                                  std::vector<int> label_map, const TrainConfig& config, TrainLog* log) {
  if (data.size() == 0) throw DataError("cannot train on an empty source");
  FinetunedModel<T> model{backbone.clone(),
                          init_head<T>(label_map.size(), backbone.config.width(), derive_seed(config.seed, 9)),
                          std::move(label_map)};
  train_backbone_and_head(model, data, config, true, log);
  return model;
}

template <typename T>
FinetunedModel<T> finetune_full(const SampleSource& data, const BackboneParams<T>& backbone,
                                std::vector<int> label_map, const TrainConfig& config, TrainLog* log) {
  if (data.size() == 0) throw DataError("cannot train on an empty source");
  FinetunedModel<T> model{backbone.clone(),
                          init_head<T>(label_map.size(), backbone.config.width(), derive_seed(config.seed, 9)),
                          std::move(label_map)};
  train_backbone_and_head(model, data, config, false, log);
  return model;
}

BackboneParams<float> pretrain_proxy(const SampleSource& data, const BackboneConfig& config, const TrainConfig& train,
                                     TrainLog* log,
                                     const std::function<double(const BackboneParams<float>&,
                                                                const LinearParams<float>&)>& eval) {
  config.validate();
  FinetunedModel<float> model{BackboneParams<float>::init(config, derive_seed(train.seed, 1)),
                              init_head<float>(static_cast<std::size_t>(config.n_classes_proxy), config.width(),
                                               derive_seed(train.seed, 2)),
                              identity_label_map(static_cast<std::size_t>(config.n_classes_proxy))};
  if (train.epochs == 0) {
    model.backbone.freeze();
    return std::move(model.backbone);
  }
  EpochEval per_epoch;
  if (eval) per_epoch = [&] { return eval(model.backbone, model.head); };
  train_backbone_and_head(model, data, train, false, log, per_epoch);
  return std::move(model.backbone);
}

template <typename T>
Tensor<T> predict_finetuned(const FinetunedModel<T>& model, const Tensor<T>& patches, std::size_t batch) {
  const auto out = forward_backbone(model.backbone, patches, batch, false);
  return softmax(linear(class_embedding(model.backbone, out), model.head.weight, model.head.bias), 1);
}

#define APT_INSTANTIATE_TRAINER(T)                                                                            \
  template class AdamW<T>;                                                                                    \
  template BackboneOutput<T> encode_samples<T>(const BackboneParams<T>&, const SampleSource&, bool, bool,     \
                                               std::size_t);                                                  \
  template SourcePromptSet<T> train_prompt<T>(const SampleSource&, const BackboneParams<T>&, std::vector<int>, \
                                              std::string, const TrainConfig&, TrainLog*, const EpochEval&);   \
  template void fit_prompt<T>(SourcePromptSet<T>&, const SampleSource&, const BackboneParams<T>&,             \
                              const TrainConfig&, TrainLog*, const EpochEval&);                               \
  template HeadModel<T> train_head_only<T>(const SampleSource&, const BackboneParams<T>&, std::vector<int>,   \
                                           const TrainConfig&, TrainLog*);                                    \
  template FinetunedModel<T> train_bias_head<T>(const SampleSource&, const BackboneParams<T>&,                 \
                                                std::vector<int>, const TrainConfig&, TrainLog*);             \
  template FinetunedModel<T> finetune_full<T>(const SampleSource&, const BackboneParams<T>&, std::vector<int>, \
                                              const TrainConfig&, TrainLog*);                                 \
  template Tensor<T> predict_finetuned<T>(const FinetunedModel<T>&, const Tensor<T>&, std::size_t);

APT_INSTANTIATE_TRAINER(float)
APT_INSTANTIATE_TRAINER(double)

#undef APT_INSTANTIATE_TRAINER

}  // namespace apt
