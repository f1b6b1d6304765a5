// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "apt/errors.hpp"
#include "apt/trainer.hpp"

using namespace apt;

namespace {

BackboneConfig tiny_config(int image = 8) {
  BackboneConfig c;
  c.image_size = image;
  c.patch_size = 4;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

// Fan-in scaled weights give a random but informative frozen feature map.
template <typename T>
BackboneParams<T> scaled_backbone(const BackboneConfig& c, std::uint64_t seed) {
  auto p = BackboneParams<T>::init(c, seed);
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : p.named_parameters())
    if (name.ends_with("weight") && name.find("ln") == std::string::npos && name.find("norm") == std::string::npos) {
      std::normal_distribution<double> n(0.0, std::sqrt(1.0 / static_cast<double>(t.cols())));
      for (auto& x : const_cast<Tensor<T>&>(t).values()) x = static_cast<T>(n(rng));
    }
  p.freeze();
  return p;
}

// Class 1 has a strong red channel, class 0 strong green and blue; per-pixel noise.
LabeledImageSet colour_set(std::size_t per_class, int size, std::uint64_t seed) {
  LabeledImageSet s;
  s.height = s.width = size;
  s.class_count = 2;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 25.0);
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const int cls = static_cast<int>(i % 2);
    s.labels.push_back(cls);
    s.domains.push_back(0);
    for (std::size_t p = 0; p < s.image_bytes(); ++p)
      s.pixels.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(((p % 3 == 0) == (cls == 1) ? 170.0 : 85.0) + noise(rng)), 0l, 255l)));
  }
  return s;
}

LabeledImageSet single_class_set(std::size_t n, int size) {
  auto s = colour_set(n, size, 3);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.labels[i] == 1) keep.push_back(i);
  return s.subset(keep);
}

template <typename T>
std::vector<std::vector<T>> snapshot(const std::vector<NamedTensor<T>>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& [name, t] : params) out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

ImageBatch all_images(const SampleSource& data) {
  ImageBatch b;
  for (std::size_t i = 0; i < data.size(); ++i) b.push_back(data.image(i));
  return b;
}

double prompt_accuracy(const BackboneParams<float>& bb, const SourcePromptSet<float>& s, const SampleSource& data) {
  NoGradScope<float> ng;
  const auto patches = patchify<float>(all_images(data), bb.config);
  const auto out = composed_forward(bb, patches, data.size(), SourceList<float>{&s});
  const auto logits = predict_source(prompt_features(bb, out.prompts[0], data.size()), s.head, false);
  std::size_t right = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = logits.values().subspan(i * 2, 2);
    const int pred = row[1] > row[0] ? 1 : 0;
    right += s.label_map[pred] == data.label(i);
  }
  return static_cast<double>(right) / static_cast<double>(data.size());
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename Logits>
double argmax_accuracy(const Logits& probs, const SampleSource& data, std::size_t classes) {
  std::size_t right = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = probs.values().subspan(i * classes, classes);
    right += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == data.label(i);
  }
  return static_cast<double>(right) / static_cast<double>(data.size());
}

}  // namespace

TEST_CASE("schedule endpoints, scaling and continuity") {
  ScheduleSpec s;
  s.steps_per_epoch = 50;
  CHECK(s.effective_base() == 0.1 * 8 / 256);
  CHECK(s.effective_base() == doctest::Approx(3.125e-3).epsilon(1e-15));
  s.validate();
  CHECK(lr_at(s, 0) == 1e-5);
  CHECK(lr_at(s, s.total_steps() - 1) == 1e-6);
  CHECK(lr_at(s, s.total_steps() + 10) == 1e-6);
  // Continuity at the warmup boundary.
  const double w = s.warmup_steps();
  CHECK(std::abs(lr_at(s, w) - lr_at(s, w - 1e-9)) < 1e-9);
  CHECK(std::abs(lr_at(s, w) - s.effective_base()) < 1e-15);
  // Monotone ramp, then monotone decay.
  for (double t = 1; t < w; ++t) CHECK(lr_at(s, t) > lr_at(s, t - 1));
  for (double t = w + 1; t < s.total_steps(); ++t) CHECK(lr_at(s, t) < lr_at(s, t - 1));

  s.n_devices = 4;
  CHECK(s.effective_base() == doctest::Approx(0.0125));
  s.start_lr = 1e-7;  // below min_lr
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.warmup_epochs = 20;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.base_lr = 1e-5;  // effective base below start_lr
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("AdamW update rule") {
  SUBCASE("zero gradient only decays") {
    Tensor<double> th(Shape{2}, {1.0, -3.0}, true);
    AdamW<double> opt({{"theta", th}}, {.weight_decay = 0.02});
    opt.step(0.1);
    CHECK(th.values()[0] == doctest::Approx(1.0 * (1 - 0.002)).epsilon(1e-15));
    CHECK(th.values()[1] == doctest::Approx(-3.0 * (1 - 0.002)).epsilon(1e-15));
  }
  SUBCASE("lambda 0 is Adam") {
    Tensor<double> th(Shape{1}, {0.5}, true);
    AdamW<double> opt({{"theta", th}}, {.weight_decay = 0.0});
    double m = 0, v = 0, ref = 0.5;
    for (int t = 1; t <= 5; ++t) {
      const double g = 2 * th.values()[0];
      th.storage()->grad.assign(1, g);
      opt.step(0.01);
      opt.zero_grad();
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      ref -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
      CHECK(th.values()[0] == doctest::Approx(ref).epsilon(1e-14));
    }
  }
  SUBCASE("converges on a quadratic") {
    Tensor<double> th = Tensor<double>::scalar(1.0, true);
    AdamW<double> opt({{"theta", th}});
    for (int i = 0; i < 100; ++i) {
      GradTape<double> tape;
      Tensor<double> loss;
      {
        TapeScope<double> scope(tape);
        loss = mul(th, th);
      }
      tape.backward(loss);
      opt.step(0.1);
      opt.zero_grad();
    }
    CHECK(std::abs(th.item()) < 0.1);
    CHECK(opt.state().step == 100);
  }
  SUBCASE("non-finite gradient names the parameter") {
    Tensor<float> a(Shape{2}, true), b(Shape{2}, true);
    AdamW<float> opt({{"a", a}, {"prompt", b}});
    b.storage()->grad = {0.0f, std::numeric_limits<float>::quiet_NaN()};
    try {
      opt.step(0.1);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("'prompt'") != std::string::npos);
    }
    CHECK(b.values()[0] == 0.0f);
    CHECK(opt.state().step == 0);
  }
}

TEST_CASE("training config defaults and JSON") {
  const auto p = TrainConfig::defaults(Regime::prompt);
  CHECK(p.base_lr == 1e-1);
  CHECK(p.start_lr == 1e-5);
  CHECK(p.min_lr == 1e-6);
  CHECK(p.weight_decay == 0.02);
  CHECK(p.warmup_epochs == 1);
  CHECK(TrainConfig::defaults(Regime::head_only).base_lr == 5e-1);
  CHECK(TrainConfig::defaults(Regime::bias_head).base_lr == 5e-3);
  for (auto r : {Regime::prompt, Regime::head_only, Regime::bias_head, Regime::finetune, Regime::pretrain}) {
    CHECK(parse_regime(to_string(r)) == r);
    TrainConfig::defaults(r).validate();
  }
  CHECK_THROWS_AS(parse_regime("lora"), ConfigError);

  auto c = TrainConfig::defaults(Regime::head_only);
  c.seed = 42;
  c.prompt.variant = PromptVariant::shallow;
  c.augment_flip = true;
  Json j = c;
  const auto back = j.get<TrainConfig>();
  CHECK(back.regime == Regime::head_only);
  CHECK(back.base_lr == 5e-1);
  CHECK(back.seed == 42);
  CHECK(back.prompt.variant == PromptVariant::shallow);
  CHECK(back.augment_flip);

  const auto partial = parse_json(R"({"regime": "bias_head", "epochs": 3})", "test").get<TrainConfig>();
  CHECK(partial.base_lr == 5e-3);
  CHECK(partial.epochs == 3);
  CHECK_THROWS_AS(parse_json(R"({"epochz": 3})", "test").get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(parse_json(R"({"epochs": "many"})", "test").get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(parse_json(R"({"start_lr": 1.0})", "test").get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(parse_json(R"({"variant": "wide"})", "test").get<TrainConfig>(), ConfigError);

  TrainLog log;
  log.rows.push_back({0, 9, 0.5, 1.25, -1});
  log.rows.push_back({1, 19, 0.25, 0.75, 0.5});
  std::ostringstream os;
  log.write_csv(os);
  CHECK(os.str() == "epoch,step,lr,train_loss,eval_acc\n0,9,0.5,1.25,\n1,19,0.25,0.75,0.5\n");
}

TEST_CASE("prompt training leaves the backbone untouched and is reproducible") {
  const auto cfg = tiny_config();
  const auto bb = BackboneParams<float>::init(cfg, 1).clone();
  auto frozen = bb.clone();
  frozen.freeze();
  const auto before = snapshot(frozen.named_parameters());
  const auto set = colour_set(12, 8, 4);
  const SetView view(set);
  auto tc = TrainConfig::defaults(Regime::prompt);
  tc.epochs = 3;
  tc.seed = 11;
  TrainLog log;
  const auto a = train_prompt(view, frozen, {0, 1}, "a", tc, &log);
  CHECK(snapshot(frozen.named_parameters()) == before);
  CHECK(log.rows.size() == 3);
  CHECK(log.rows.back().step == 8);
  const auto b = train_prompt(view, frozen, {0, 1}, "a", tc);
  CHECK(snapshot(a.parameters()) == snapshot(b.parameters()));
  tc.seed = 12;
  const auto c = train_prompt(view, frozen, {0, 1}, "a", tc);
  CHECK(snapshot(a.parameters()) != snapshot(c.parameters()));
  CHECK(a.backbone_fingerprint == frozen.fingerprint());

  tc.augment_flip = true;
  const auto f = train_prompt(view, frozen, {0, 1}, "a", tc);
  CHECK(snapshot(f.parameters()) != snapshot(c.parameters()));
  CHECK(snapshot(frozen.named_parameters()) == before);

  CHECK_THROWS_AS(train_prompt(view, bb, {0, 1}, "a", tc), ConfigError);
  const SetView empty(set, {});
  CHECK_THROWS_AS(train_prompt(empty, frozen, {0, 1}, "a", tc), DataError);
  CHECK_THROWS_AS(train_prompt(view, frozen, {0}, "a", tc), LabelError);
}

TEST_CASE("full-attention training lets the input tokens see the prompt") {
  const auto cfg = tiny_config();
  auto bb = BackboneParams<double>::init(cfg, 2);
  bb.freeze();
  const auto set = colour_set(4, 8, 5);
  const SetView view(set);
  auto tc = TrainConfig::defaults(Regime::prompt);
  tc.epochs = 2;
  const auto s = train_prompt(view, bb, {0, 1}, "s", tc);
  tc.full_attention = true;
  const auto f = train_prompt(view, bb, {0, 1}, "s", tc);
  CHECK(snapshot(s.parameters()) != snapshot(f.parameters()));
  CHECK(std::isfinite(f.prompt.values()[0]));
}

TEST_CASE("one-class source drives the loss to zero") {
  const auto cfg = tiny_config();
  const auto bb = scaled_backbone<float>(cfg, 3);
  const auto set = single_class_set(64, 8);
  const SetView view(set);
  auto tc = TrainConfig::defaults(Regime::prompt);
  tc.epochs = 20;
  TrainLog log;
  train_prompt(view, bb, {1}, "one", tc, &log);
  // A single logit: the softmax is constant and the loss is exactly zero.
  CHECK(log.rows.back().train_loss == doctest::Approx(0.0).epsilon(1e-6));

  // Two local classes, only one ever observed.
  TrainLog log2;
  train_prompt(view, bb, {0, 1}, "two", tc, &log2);
  CHECK(log2.rows.back().train_loss < 0.1 * log2.rows.front().train_loss);
}

TEST_CASE("prompt tuning separates a two-class toy") {
  const auto cfg = tiny_config();
  const auto bb = scaled_backbone<float>(cfg, 4);
  const auto train = colour_set(40, 8, 6);
  const auto test = colour_set(50, 8, 7);
  const SetView tv(train), ev(test);
  auto tc = TrainConfig::defaults(Regime::prompt);
  const auto s = train_prompt(tv, bb, {0, 1}, "toy", tc);
  CHECK(prompt_accuracy(bb, s, ev) > 0.95);
}

TEST_CASE("regimes train only their parameter subsets") {
  const auto cfg = tiny_config();
  auto bb = BackboneParams<float>::init(cfg, 5);
  bb.freeze();
  const auto before = snapshot(bb.named_parameters());
  const auto set = colour_set(8, 8, 8);
  const SetView view(set);

  auto tc = TrainConfig::defaults(Regime::head_only);
  tc.epochs = 2;
  const auto head = train_head_only(view, bb, {0, 1}, tc);
  CHECK(snapshot(bb.named_parameters()) == before);
  CHECK(head.head.weight.shape() == Shape{2, 8});

  tc = TrainConfig::defaults(Regime::bias_head);
  tc.epochs = 2;
  const auto bias = train_bias_head(view, bb, {0, 1}, tc);
  CHECK(snapshot(bb.named_parameters()) == before);
  const auto after = snapshot(bias.backbone.named_parameters());
  const auto names = bb.named_parameters();
  std::size_t changed_bias = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].first.ends_with(".bias"))
      changed_bias += after[i] != before[i];
    else
      CHECK_MESSAGE(after[i] == before[i], names[i].first);
  }
  CHECK(changed_bias > 0);
  CHECK(bias.backbone.frozen);

  tc = TrainConfig::defaults(Regime::finetune);
  tc.epochs = 2;
  const auto full = finetune_full(view, bb, {0, 1}, tc);
  CHECK(snapshot(bb.named_parameters()) == before);
  CHECK(bb.frozen);
  CHECK(bb.fingerprint() == BackboneParams<float>(bb).fingerprint());
  const auto ft = snapshot(full.backbone.named_parameters());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < names.size(); ++i) changed += ft[i] != before[i];
  CHECK(changed > names.size() / 2);
  CHECK(full.backbone.fingerprint() != bb.fingerprint());

  const auto again = finetune_full(view, bb, {0, 1}, tc);
  CHECK(snapshot(again.backbone.named_parameters()) == ft);
}

TEST_CASE("finetuning beats head-only on a pattern toy") {
  auto cfg = tiny_config(16);
  cfg.d_model = 16;
  double ft_sum = 0, ho_sum = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SyntheticSpec spec;
    spec.n_classes = 4;
    spec.samples_per_class = 24;
    spec.image_size = 16;
    spec.seed = seed;
    const auto train = gen_synthetic(spec);
    spec.split = Split::test;
    spec.samples_per_class = 20;
    const auto test = gen_synthetic(spec);
    const SetView tv(train), ev(test);
    const auto bb = scaled_backbone<float>(cfg, 100 + seed);
    const auto patches = patchify<float>(all_images(ev), cfg);

    auto tc = TrainConfig::defaults(Regime::head_only);
    tc.epochs = 10;
    tc.seed = seed;
    const auto head = train_head_only(tv, bb, identity_label_map(4), tc);
    {
      NoGradScope<float> ng;
      const auto out = forward_backbone(bb, patches, ev.size(), false);
      ho_sum += argmax_accuracy(linear(class_embedding(bb, out), head.head.weight, head.head.bias), ev, 4);
    }
    tc = TrainConfig::defaults(Regime::finetune);
    tc.epochs = 10;
    tc.seed = seed;
    const auto ft = finetune_full(tv, bb, identity_label_map(4), tc);
    NoGradScope<float> ng;
    ft_sum += argmax_accuracy(predict_finetuned(ft, patches, ev.size()), ev, 4);
  }
  MESSAGE("finetune ", ft_sum / 5, " head-only ", ho_sum / 5);
  CHECK(ft_sum >= ho_sum);
}

TEST_CASE("proxy pretraining returns a frozen backbone") {
  const auto cfg = tiny_config();
  const auto set = colour_set(8, 8, 9);
  const SetView view(set);
  auto tc = TrainConfig::defaults(Regime::pretrain);
  tc.epochs = 0;
  const auto init = pretrain_proxy(view, cfg, tc);
  CHECK(init.frozen);
  tc.epochs = 2;
  tc.batch_size = 4;
  TrainLog log;
  int calls = 0;
  const auto trained = pretrain_proxy(view, cfg, tc, &log, [&](const BackboneParams<float>& b, const LinearParams<float>&) {
    ++calls;
    CHECK_FALSE(b.frozen);
    return 0.5;
  });
  CHECK(trained.frozen);
  CHECK(calls == 2);
  CHECK(log.rows.back().eval_acc == 0.5);
  CHECK(trained.fingerprint() != init.fingerprint());
  CHECK(trained.frozen_fingerprint == trained.clone().fingerprint());
}

TEST_CASE("encode_samples matches a direct forward pass") {
  const auto cfg = tiny_config();
  auto bb = BackboneParams<double>::init(cfg, 6);
  bb.freeze();
  const auto set = colour_set(5, 8, 10);
  const SetView view(set);
  const auto chunked = encode_samples(bb, view, true, false, 3);
  const auto direct = forward_backbone(bb, patchify<double>(all_images(view), cfg), view.size(), true);
  CHECK(chunked.batch == 10);
  CHECK(max_abs_diff(chunked.tokens, direct.tokens) < 1e-12);
  REQUIRE(chunked.layers.size() == 2);
  CHECK(max_abs_diff(chunked.layers[1].keys, direct.layers[1].keys) < 1e-12);
  CHECK(max_abs_diff(chunked.layers[0].values, direct.layers[0].values) < 1e-12);
  CHECK(encode_samples(bb, view, false).layers.empty());
}
