// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include "apt/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "apt/errors.hpp"
#include "apt/io.hpp"
#include "apt/random.hpp"

namespace apt {

// ---------------------------------------------------------------------------
// Names and JSON

namespace {

constexpr std::pair<Method, const char*> kMethodNames[] = {
    {Method::apt, "apt"},
    {Method::apt_logits, "apt_logits"},
    {Method::apt_w, "apt_w"},
    {Method::majority_vote, "majority_vote"},
    {Method::param_average, "param_average"},
    {Method::naive_concat, "naive_concat"},
    {Method::finetune_ensemble, "finetune_ensemble"},
    {Method::head_only_ensemble, "head_only_ensemble"},
    {Method::paragon, "paragon"},
    {Method::paragon_full, "paragon_full"},
};

std::string kind_name(DataSpec::Kind k) {
  switch (k) {
    case DataSpec::Kind::synthetic: return "synthetic";
    case DataSpec::Kind::cifar10: return "cifar10";
    case DataSpec::Kind::cifar100: return "cifar100";
  }
  return "synthetic";
}

DataSpec::Kind parse_kind(const std::string& s) {
  if (s == "synthetic") return DataSpec::Kind::synthetic;
  if (s == "cifar10") return DataSpec::Kind::cifar10;
  if (s == "cifar100") return DataSpec::Kind::cifar100;
  throw ConfigError("unknown data kind '" + s + "'");
}

Json synthetic_json(const SyntheticSpec& s) {
  return Json{{"n_classes", s.n_classes},         {"n_domains", s.n_domains}, {"samples_per_class", s.samples_per_class},
              {"image_size", s.image_size},       {"seed", s.seed},           {"noise", s.noise},
              {"jitter", s.jitter},               {"random_hue", s.random_hue}};
}

void read_synthetic(const Json& j, SyntheticSpec& s) {
  reject_unknown_keys(j, {"n_classes", "n_domains", "samples_per_class", "image_size", "seed", "noise", "jitter",
                          "random_hue"},
                      "synthetic corpus");
  read_optional(j, "n_classes", s.n_classes);
  read_optional(j, "n_domains", s.n_domains);
  read_optional(j, "samples_per_class", s.samples_per_class);
  read_optional(j, "image_size", s.image_size);
  read_optional(j, "seed", s.seed);
  read_optional(j, "noise", s.noise);
  read_optional(j, "jitter", s.jitter);
  read_optional(j, "random_hue", s.random_hue);
}

Json data_json(const DataSpec& d) {
  return Json{{"kind", kind_name(d.kind)},
              {"synthetic", synthetic_json(d.synthetic)},
              {"test_samples_per_class", d.test_samples_per_class},
              {"train_path", d.train_path.string()},
              {"test_path", d.test_path.string()}};
}

void read_data(const Json& j, DataSpec& d, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
  reject_unknown_keys(j, {"kind", "synthetic", "test_samples_per_class", "train_path", "test_path"}, what);
  std::string kind = kind_name(d.kind);
  read_optional(j, "kind", kind);
  d.kind = parse_kind(kind);
  if (auto it = j.find("synthetic"); it != j.end()) read_synthetic(*it, d.synthetic);
  read_optional(j, "test_samples_per_class", d.test_samples_per_class);
  std::string p = d.train_path.string();
  read_optional(j, "train_path", p);
  d.train_path = p;
  p = d.test_path.string();
  read_optional(j, "test_path", p);
  d.test_path = p;
}

void read_train(const Json& j, const char* key, TrainConfig& c) {
  if (auto it = j.find(key); it != j.end()) {
    if (!it->is_object()) throw ConfigError(std::string("'") + key + "' must be an object");
    from_json(*it, c);
  }
}

}  // namespace

std::string to_string(Method m) {
  for (const auto& [k, v] : kMethodNames)
    if (k == m) return v;
  return "apt";
}

Method parse_method(const std::string& name) {
  for (const auto& [k, v] : kMethodNames)
    if (name == v) return k;
  throw ConfigError("unknown method '" + name + "'");
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.paragon.epochs = 40;
  c.proxy.synthetic.samples_per_class = 100;
  c.proxy.synthetic.seed = 1000;
  c.data.synthetic.noise = 0.25;
  c.data.synthetic.jitter = 0.2;
  c.data.synthetic.samples_per_class = 30;
  return c;
}

void ExperimentConfig::validate() const {
  backbone.validate();
  pretrain.validate();
  prompt.validate();
  paragon.validate();
  finetune.validate();
  head_only.validate();
  if (prompt.regime != Regime::prompt || paragon.regime != Regime::prompt)
    throw ConfigError("prompt and paragon configs must use the prompt regime");
  if (finetune.regime != Regime::finetune) throw ConfigError("finetune config must use the finetune regime");
  if (head_only.regime != Regime::head_only) throw ConfigError("head_only config must use the head_only regime");
  if (pretrain.regime != Regime::pretrain) throw ConfigError("pretrain config must use the pretrain regime");
  if (paragon.epochs < prompt.epochs)
    throw ConfigError("paragon epochs (" + std::to_string(paragon.epochs) + ") below prompt epochs (" +
                      std::to_string(prompt.epochs) + ")");
  if (shard_counts.empty()) throw ConfigError("shard_counts is empty");
  for (auto n : shard_counts)
    if (n == 0) throw ConfigError("shard counts must be positive");
  if (seeds.empty()) throw ConfigError("seeds is empty");
  if (forget_sources < 2) throw ConfigError("forget_sources must be at least 2");
  if (n_episodes == 0) throw ConfigError("n_episodes must be positive");
  if (dil_domains == 0) throw ConfigError("dil_domains must be positive");
  if (train_domains.empty()) throw ConfigError("train_domains is empty");
  for (int d : train_domains)
    if (d < 0 || (data.kind == DataSpec::Kind::synthetic && static_cast<std::size_t>(d) >= dil_domains))
      throw ConfigError("train domain " + std::to_string(d) + " outside [0, dil_domains)");
  if (prototypes.K == 0) throw ConfigError("prototype K must be positive");
  if (!(prototypes.beta >= 0)) throw ConfigError("beta must be non-negative");
  if (workers == 0) throw ConfigError("workers must be positive");
  if (bench_sizes.empty() || bench_batch == 0 || bench_repeats == 0)
    throw ConfigError("bench sizes, batch and repeats must be non-empty and positive");
  for (const DataSpec* d : {&proxy, &data}) {
    if (d->kind == DataSpec::Kind::synthetic) {
      if (d->synthetic.image_size != backbone.image_size)
        throw ConfigError("synthetic image_size " + std::to_string(d->synthetic.image_size) +
                          " differs from the backbone's " + std::to_string(backbone.image_size));
      if (d->synthetic.n_classes == 0 || d->synthetic.samples_per_class == 0 || d->test_samples_per_class == 0)
        throw ConfigError("synthetic corpus sizes must be positive");
    } else if (d->train_path.empty() || d->test_path.empty()) {
      throw ConfigError("CIFAR data needs train_path and test_path");
    }
  }
}

void to_json(Json& j, const ExperimentConfig& c) {
  std::vector<std::string> methods;
  for (auto m : c.methods) methods.push_back(to_string(m));
  j = Json{{"backbone", c.backbone},
           {"backbone_path", c.backbone_path.string()},
           {"proxy", data_json(c.proxy)},
           {"pretrain", c.pretrain},
           {"data", data_json(c.data)},
           {"prompt", c.prompt},
           {"paragon", c.paragon},
           {"finetune", c.finetune},
           {"head_only", c.head_only},
           {"shard_counts", c.shard_counts},
           {"seeds", c.seeds},
           {"methods", methods},
           {"forget_sources", c.forget_sources},
           {"n_episodes", c.n_episodes},
           {"dil_domains", c.dil_domains},
           {"train_domains", c.train_domains},
           {"prototypes", Json{{"K", c.prototypes.K}, {"beta", c.prototypes.beta}}},
           {"bench_sizes", c.bench_sizes},
           {"bench_batch", c.bench_batch},
           {"bench_repeats", c.bench_repeats},
           {"workers", c.workers},
           {"timing", c.timing}};
}

void from_json(const Json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  reject_unknown_keys(j,
                      {"backbone", "backbone_path", "proxy", "pretrain", "data", "prompt", "paragon", "finetune",
                       "head_only", "shard_counts", "seeds", "methods", "forget_sources", "n_episodes", "dil_domains",
                       "train_domains", "prototypes", "bench_sizes", "bench_batch", "bench_repeats", "workers",
                       "timing"},
                      "experiment config");
  if (auto it = j.find("backbone"); it != j.end()) from_json(*it, c.backbone);
  std::string path = c.backbone_path.string();
  read_optional(j, "backbone_path", path);
  c.backbone_path = path;
  if (auto it = j.find("proxy"); it != j.end()) read_data(*it, c.proxy, "proxy");
  if (auto it = j.find("data"); it != j.end()) read_data(*it, c.data, "data");
  read_train(j, "pretrain", c.pretrain);
  read_train(j, "prompt", c.prompt);
  read_train(j, "paragon", c.paragon);
  read_train(j, "finetune", c.finetune);
  read_train(j, "head_only", c.head_only);
  read_optional(j, "shard_counts", c.shard_counts);
  read_optional(j, "seeds", c.seeds);
  if (j.contains("methods")) {
    std::vector<std::string> names;
    read_optional(j, "methods", names);
    c.methods.clear();
    for (const auto& n : names) c.methods.push_back(parse_method(n));
  }
  read_optional(j, "forget_sources", c.forget_sources);
  read_optional(j, "n_episodes", c.n_episodes);
  read_optional(j, "dil_domains", c.dil_domains);
  read_optional(j, "train_domains", c.train_domains);
  if (auto it = j.find("prototypes"); it != j.end()) {
    reject_unknown_keys(*it, {"K", "beta"}, "prototypes");
    read_optional(*it, "K", c.prototypes.K);
    read_optional(*it, "beta", c.prototypes.beta);
  }
  read_optional(j, "bench_sizes", c.bench_sizes);
  read_optional(j, "bench_batch", c.bench_batch);
  read_optional(j, "bench_repeats", c.bench_repeats);
  read_optional(j, "workers", c.workers);
  read_optional(j, "timing", c.timing);
  c.validate();
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw ConfigError("cannot read config '" + path.string() + "': " + e.what());
  }
  ExperimentConfig c = ExperimentConfig::defaults();
  from_json(parse_json(text, path.string()), c);
  return c;
}

// ---------------------------------------------------------------------------
// Reports

std::string format_number(double v) {
  if (v == 0) return "0";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::vector<ReportAggregate> ExperimentReport::aggregate() const {
  std::vector<ReportAggregate> out;
  std::map<std::pair<std::string, std::string>, std::vector<double>> values;
  for (const auto& r : rows) {
    if (r.accuracy < 0 && r.method != "paragon_gap") continue;
    auto key = std::make_pair(r.group, r.method);
    if (!values.contains(key)) out.push_back({r.group, r.method, 0, 0, 0});
    values[key].push_back(r.accuracy);
  }
  for (auto& a : out) {
    const auto& v = values[{a.group, a.method}];
    a.n = v.size();
    double s = 0;
    for (double x : v) s += x;
    a.mean = s / static_cast<double>(a.n);
    double ss = 0;
    for (double x : v) ss += (x - a.mean) * (x - a.mean);
    a.std = a.n > 1 ? std::sqrt(ss / static_cast<double>(a.n - 1)) : 0.0;
  }
  return out;
}

double ExperimentReport::mean(const std::string& method, const std::optional<std::string>& group) const {
  double s = 0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.method != method || (group && r.group != *group)) continue;
    if (r.accuracy < 0 && method != "paragon_gap") continue;
    s += r.accuracy;
    ++n;
  }
  if (n == 0) throw LookupError("report has no rows for method '" + method + "'" + (group ? " in group '" + *group + "'" : ""));
  return s / static_cast<double>(n);
}

void ExperimentReport::write_csv(std::ostream& out) const {
  out << "scenario,seed,group,method,accuracy,wall_ms,flops\n";
  for (const auto& r : rows) {
    const bool has_acc = r.accuracy >= 0 || r.method == "paragon_gap";
    out << r.scenario << ',' << r.seed << ',' << r.group << ',' << r.method << ','
        << (has_acc ? format_number(r.accuracy) : std::string()) << ',' << format_number(r.wall_ms) << ','
        << format_number(r.flops) << '\n';
  }
}

void ExperimentReport::write_summary(std::ostream& out) const {
  out << "scenario: " << scenario << '\n';
  out << "rows: " << rows.size() << '\n';
  const auto agg = aggregate();
  if (!agg.empty()) {
    std::size_t gw = 5, mw = 6;
    for (const auto& a : agg) gw = std::max(gw, a.group.size()), mw = std::max(mw, a.method.size());
    auto pad = [](std::string s, std::size_t w) { return s.append(w > s.size() ? w - s.size() : 0, ' '); };
    out << pad("group", gw) << "  " << pad("method", mw) << "  n  mean      std\n";
    for (const auto& a : agg) {
      char mean[32], sd[32];
      std::snprintf(mean, sizeof mean, "%.4f", a.mean);
      std::snprintf(sd, sizeof sd, "%.4f", a.std);
      out << pad(a.group, gw) << "  " << pad(a.method, mw) << "  " << a.n << "  " << pad(mean, 8) << "  " << sd
          << '\n';
    }
  }
  for (const auto& n : notes) out << n << '\n';
}

void ExperimentReport::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ostringstream csv, summary;
  write_csv(csv);
  write_summary(summary);
  write_file_atomic(dir / "report.csv", csv.str());
  write_file_atomic(dir / "summary.txt", summary.str());
  write_file_atomic(dir / "config.json", config.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Workers

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto run = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t t = std::min(std::max<std::size_t>(1, workers), n);
  if (t == 1) {
    run();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < t; ++i) pool.emplace_back(run);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Data and backbone

Corpus load_corpus(const DataSpec& spec, std::uint64_t seed) {
  Corpus c;
  if (spec.kind == DataSpec::Kind::synthetic) {
    SyntheticSpec s = spec.synthetic;
    s.seed = derive_seed(spec.synthetic.seed, seed);
    s.split = Split::train;
    c.train = gen_synthetic(s);
    s.split = Split::test;
    s.samples_per_class = spec.test_samples_per_class;
    c.test = gen_synthetic(s);
  } else {
    const auto v = spec.kind == DataSpec::Kind::cifar10 ? CifarVariant::cifar10 : CifarVariant::cifar100;
    c.train = load_cifar_binary(spec.train_path, v);
    c.test = load_cifar_binary(spec.test_path, v);
    c.test.split = Split::test;
  }
  return c;
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

template <typename T>
Tensor<T> patches_of(const LabeledImageSet& set, std::size_t begin, std::size_t end, const BackboneConfig& cfg) {
  ImageBatch images;
  for (std::size_t i = begin; i < end; ++i) images.push_back(set.image(i));
  return patchify<T>(images, cfg);
}

/// Row-concatenated scores of `fn` over chunks of a set.
template <typename T, typename F>
ScoreMatrix chunked_scores(const LabeledImageSet& set, const BackboneConfig& cfg, std::size_t chunk, F&& fn) {
  ScoreMatrix out;
  out.rows = set.size();
  NoGradScope<T> no_grad;
  for (std::size_t b = 0; b < set.size(); b += chunk) {
    const std::size_t e = std::min(set.size(), b + chunk);
    ScoreMatrix s = fn(patches_of<T>(set, b, e, cfg), e - b);
    out.cols = s.cols;
    out.values.insert(out.values.end(), s.values.begin(), s.values.end());
  }
  return out;
}

double accuracy_of(const ScoreMatrix& s, const LabeledImageSet& set) { return accuracy(s.argmax(), set.labels); }

template <typename T>
SelectionOutput<T> selection_from(const BackboneParams<T>& backbone, const ComposedOutput<T>& out,
                                  const SourceList<T>& sources) {
  SelectionOutput<T> sel;
  sel.batch = out.batch;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    sel.ids.push_back(sources[i]->source_id);
    sel.label_maps.push_back(sources[i]->label_map);
    sel.logits.push_back(
        predict_source(prompt_features(backbone, out.prompts[i], out.batch), sources[i]->head, false));
  }
  return sel;
}

TrainConfig seeded(TrainConfig c, std::uint64_t seed) {
  c.seed = seed;
  return c;
}

std::vector<std::string> ids_of(const std::vector<EpisodeSpec>& eps) {
  std::vector<std::string> ids;
  for (const auto& e : eps) ids.push_back(e.name);
  return ids;
}

FlopModel flop_model(const BackboneConfig& cfg, const TrainConfig& prompt, std::size_t n_classes) {
  return FlopModel{cfg, prompt.prompt.n_tokens, prompt.prompt.d_mem, n_classes};
}

template <typename T>
void require_frozen(const BackboneParams<T>& backbone) {
  if (!backbone.frozen) throw ConfigError("experiments need a frozen backbone");
}

void say(std::ostream* log, const std::string& line) {
  if (log) *log << line << std::endl;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Prompts for a list of episodes, trained concurrently. Source i of a run
/// seeded `train_seed` is initialized from derive_seed(train_seed, i).
template <typename T>
std::vector<SourcePromptSet<T>> train_sources(const LabeledImageSet& train, const std::vector<EpisodeSpec>& eps,
                                              const BackboneParams<T>& backbone, const TrainConfig& cfg,
                                              std::uint64_t train_seed, std::size_t workers) {
  std::vector<SourcePromptSet<T>> out(eps.size());
  parallel_for(eps.size(), workers, [&](std::size_t i) {
    SetView view(train, eps[i].members);
    out[i] = train_prompt<T>(view, backbone, eps[i].label_map, eps[i].name, seeded(cfg, derive_seed(train_seed, i)));
  });
  return out;
}

template <typename T>
PromptPool<T> memory_pool(const BackboneParams<T>& backbone, std::size_t n_classes, std::vector<SourcePromptSet<T>> sources,
                          const PoolDefaults& defaults) {
  PromptPool<T> pool("harness", backbone.config, backbone.fingerprint(), n_classes, defaults);
  for (auto& s : sources) pool.add(std::move(s));
  return pool;
}

}  // namespace

BackboneParams<float> obtain_backbone(const ExperimentConfig& config, std::ostream* log) {
  if (!config.backbone_path.empty()) {
    auto b = load_backbone(config.backbone_path);
    say(log, "loaded backbone " + b.fingerprint() + " from " + config.backbone_path.string());
    return b;
  }
  const Corpus proxy = load_corpus(config.proxy, config.pretrain.seed);
  SetView view(proxy.train);
  TrainLog tl;
  const auto t0 = Clock::now();
  // Proxy test accuracy of the throwaway head, measured after every epoch.
  auto eval = [&](const BackboneParams<float>& bb, const LinearParams<float>& head) {
    NoGradScope<float> ng;
    const auto s = chunked_scores<float>(proxy.test, bb.config, 256, [&](const Tensor<float>& p, std::size_t n) {
      const auto logits = predict_source(class_embedding(bb, forward_backbone(bb, p, n, false)), head, false);
      ScoreMatrix m{n, logits.cols(), std::vector<double>(logits.values().begin(), logits.values().end())};
      return m;
    });
    return accuracy_of(s, proxy.test);
  };
  auto b = pretrain_proxy(view, config.backbone, config.pretrain, &tl, eval);
  if (!tl.rows.empty())
    say(log, "pretrained backbone " + b.fingerprint() + " in " + pct(ms_since(t0) / 1000) + " s, final loss " +
                 pct(tl.rows.back().train_loss) + ", proxy test accuracy " + pct(tl.rows.back().eval_acc));
  else
    say(log, "backbone " + b.fingerprint() + " (no pretraining epochs)");
  return b;
}

template <typename T>
SelectionOutput<T> evaluate_selection(const BackboneParams<T>& backbone, const LabeledImageSet& set,
                                      const PromptSource<T>& pool, const std::vector<std::string>& ids,
                                      std::size_t chunk) {
  NoGradScope<T> no_grad;
  SelectionOutput<T> out;
  out.batch = set.size();
  std::vector<std::vector<T>> logits;
  std::vector<std::size_t> cols;
  std::vector<T> emb;
  for (std::size_t b = 0; b < set.size(); b += chunk) {
    const std::size_t e = std::min(set.size(), b + chunk);
    auto part = select_and_forward(backbone, patches_of<T>(set, b, e, backbone.config), e - b, pool, ids);
    if (logits.empty()) {
      out.ids = part.ids;
      out.label_maps = part.label_maps;
      logits.resize(part.logits.size());
      for (const auto& l : part.logits) cols.push_back(l.cols());
    }
    for (std::size_t s = 0; s < part.logits.size(); ++s)
      logits[s].insert(logits[s].end(), part.logits[s].values().begin(), part.logits[s].values().end());
    emb.insert(emb.end(), part.class_embedding.values().begin(), part.class_embedding.values().end());
  }
  if (set.size() == 0) {
    out.ids = ids;
    return out;
  }
  for (std::size_t s = 0; s < logits.size(); ++s) out.logits.emplace_back(Shape{set.size(), cols[s]}, std::move(logits[s]));
  out.class_embedding = Tensor<T>(Shape{set.size(), backbone.config.width()}, std::move(emb));
  return out;
}

double linear_fit_r2(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw DataError("linear fit needs at least two paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) throw DataError("linear fit needs distinct x values");
  if (syy == 0) return 1.0;
  const double slope = sxy / sxx, icept = my - slope * mx;
  double sse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (icept + slope * x[i]);
    sse += r * r;
  }
  return 1.0 - sse / syy;
}

// ---------------------------------------------------------------------------
// Uniform sharding

template <typename T>
ExperimentReport shard_sweep(const BackboneParams<T>& backbone, const ExperimentConfig& config, std::ostream* log) {
  config.validate();
  require_frozen(backbone);
  ExperimentReport rep;
  rep.scenario = "shard_sweep";
  rep.config = config;
  const auto has = [&](Method m) { return std::find(config.methods.begin(), config.methods.end(), m) != config.methods.end(); };
  const auto& cfg = backbone.config;

  for (const auto seed : config.seeds) {
    const Corpus corpus = load_corpus(config.data, seed);
    const std::size_t C = corpus.train.class_count;
    const auto fm = flop_model(cfg, config.prompt, C);
    const auto identity = identity_label_map(C);
    const std::uint64_t train_seed = derive_seed(seed, 2);
    auto row = [&](const std::string& group, const std::string& method, double acc, double ms, double flops) {
      rep.rows.push_back({rep.scenario, seed, group, method, acc, config.timing ? ms : 0.0, flops});
    };

    // Paragon: one prompt over the whole training set, seeded like source 0.
    SetView all_view(corpus.train);
    auto paragon = train_prompt<T>(all_view, backbone, identity, "paragon",
                                   seeded(config.paragon, derive_seed(train_seed, 0)));
    auto paragon_pool = memory_pool<T>(backbone, C, {}, config.prototypes);
    paragon_pool.add(paragon.clone());
    auto t0 = Clock::now();
    const double paragon_acc =
        accuracy_of(average_probabilities(evaluate_selection(backbone, corpus.test, paragon_pool, {"paragon"}), C),
                    corpus.test);
    const double paragon_ms = ms_since(t0);
    std::optional<double> paragon_full_acc;
    double paragon_full_ms = 0;
    if (has(Method::paragon_full)) {
      auto pc = seeded(config.paragon, derive_seed(train_seed, 0));
      pc.full_attention = true;
      auto pf = train_prompt<T>(all_view, backbone, identity, "paragon_full", pc);
      const SourceList<T> one{&pf};
      t0 = Clock::now();
      const auto s = chunked_scores<T>(corpus.test, cfg, 64, [&](const Tensor<T>& p, std::size_t b) {
        return average_probabilities(selection_from(backbone, naive_concat_forward(backbone, p, b, one), one), C);
      });
      paragon_full_acc = accuracy_of(s, corpus.test);
      paragon_full_ms = ms_since(t0);
    }
    say(log, "[shard-sweep] seed " + std::to_string(seed) + " paragon " + pct(paragon_acc));

    for (const auto n : config.shard_counts) {
      const std::string g = std::to_string(n);
      const auto shards = shard_uniform(corpus.train, n, derive_seed(seed, 1000 + n));
      auto sources = train_sources<T>(corpus.train, shards, backbone, config.prompt, train_seed, config.workers);
      SourceList<T> list;
      for (const auto& s : sources) list.push_back(&s);
      const auto ids = ids_of(shards);
      auto pool = memory_pool<T>(backbone, C, {}, config.prototypes);
      for (const auto& s : sources) pool.add(s.clone());

      t0 = Clock::now();
      const auto sel = evaluate_selection(backbone, corpus.test, pool, ids);
      const double sel_ms = ms_since(t0);
      t0 = Clock::now();
      const double apt_acc = accuracy_of(average_probabilities(sel, C), corpus.test);
      row(g, "apt", apt_acc, sel_ms + ms_since(t0), flops_composed(fm, n));
      if (has(Method::apt_logits))
        row(g, "apt_logits", accuracy_of(average_logits(sel, C), corpus.test), sel_ms, flops_composed(fm, n));
      if (has(Method::majority_vote)) {
        t0 = Clock::now();
        const auto votes = majority_vote(sel, C);
        row(g, "majority_vote", accuracy(votes, corpus.test.labels), sel_ms + ms_since(t0), flops_composed(fm, n));
      }
      if (has(Method::param_average)) {
        auto avg = average_prompts(list, "average");
        auto apool = memory_pool<T>(backbone, C, {}, config.prototypes);
        apool.add(std::move(avg));
        t0 = Clock::now();
        const double a =
            accuracy_of(average_probabilities(evaluate_selection(backbone, corpus.test, apool, {"average"}), C),
                        corpus.test);
        row(g, "param_average", a, ms_since(t0), flops_composed(fm, 1));
      }
      if (has(Method::naive_concat)) {
        t0 = Clock::now();
        const auto s = chunked_scores<T>(corpus.test, cfg, 64, [&](const Tensor<T>& p, std::size_t b) {
          return average_probabilities(selection_from(backbone, naive_concat_forward(backbone, p, b, list), list), C);
        });
        row(g, "naive_concat", accuracy_of(s, corpus.test), ms_since(t0), flops_naive(fm, n));
      }
      if (has(Method::finetune_ensemble)) {
        std::vector<FinetunedModel<T>> models(n);
        parallel_for(n, config.workers, [&](std::size_t i) {
          SetView v(corpus.train, shards[i].members);
          models[i] = finetune_full<T>(v, backbone, identity, seeded(config.finetune, derive_seed(derive_seed(seed, 3), i)));
        });
        std::vector<const FinetunedModel<T>*> ptrs;
        for (const auto& m : models) ptrs.push_back(&m);
        t0 = Clock::now();
        const auto s = chunked_scores<T>(corpus.test, cfg, 128, [&](const Tensor<T>& p, std::size_t b) {
          return ensemble_finetuned(ptrs, p, b, C);
        });
        row(g, "finetune_ensemble", accuracy_of(s, corpus.test), ms_since(t0), flops_ensemble(fm, n));
      }
      if (has(Method::head_only_ensemble)) {
        std::vector<HeadModel<T>> heads(n);
        parallel_for(n, config.workers, [&](std::size_t i) {
          SetView v(corpus.train, shards[i].members);
          heads[i] = train_head_only<T>(v, backbone, identity, seeded(config.head_only, derive_seed(derive_seed(seed, 4), i)));
        });
        std::vector<const HeadModel<T>*> ptrs;
        for (const auto& h : heads) ptrs.push_back(&h);
        t0 = Clock::now();
        const auto s = chunked_scores<T>(corpus.test, cfg, 128, [&](const Tensor<T>& p, std::size_t b) {
          return ensemble_heads(backbone, ptrs, p, b, C);
        });
        const double head_flops = flops_backbone(fm) + 2.0 * static_cast<double>(n * C * cfg.width());
        row(g, "head_only_ensemble", accuracy_of(s, corpus.test), ms_since(t0), head_flops);
      }
      row(g, "paragon", paragon_acc, paragon_ms, flops_composed(fm, 1));
      if (paragon_full_acc) row(g, "paragon_full", *paragon_full_acc, paragon_full_ms, flops_naive(fm, 1));
      rep.rows.push_back({rep.scenario, seed, g, "paragon_gap", paragon_acc - apt_acc, 0.0, 0.0});
      say(log, "[shard-sweep] seed " + std::to_string(seed) + " n " + g + " apt " + pct(apt_acc) + " gap " +
                   pct(paragon_acc - apt_acc));
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Forgetting

template <typename T>
ExperimentReport forget_curve(const BackboneParams<T>& backbone, const ExperimentConfig& config,
                              const std::filesystem::path& pool_dir, std::ostream* log) {
  config.validate();
  require_frozen(backbone);
  ExperimentReport rep;
  rep.scenario = "forget_curve";
  rep.config = config;
  for (const auto seed : config.seeds) {
    const Corpus corpus = load_corpus(config.data, seed);
    const std::size_t C = corpus.train.class_count, n = config.forget_sources;
    const auto fm = flop_model(backbone.config, config.prompt, C);
    const auto shards = shard_uniform(corpus.train, n, derive_seed(seed, 1000 + n));
    const auto sources = train_sources<T>(corpus.train, shards, backbone, config.prompt, derive_seed(seed, 2), config.workers);

    const auto dir = pool_dir / ("seed-" + std::to_string(seed));
    if (std::filesystem::exists(dir / "manifest.json")) std::filesystem::remove_all(dir);
    {
      auto pool = PromptPool<T>::create(dir, "forget", backbone.config, backbone.fingerprint(), C, config.prototypes);
      for (const auto& s : sources) pool.add(s.clone());
    }
    auto pool = PromptPool<T>::open(dir);
    const auto order = Rng(derive_seed(seed, 3)).permutation(n);
    std::vector<bool> removed(n, false);

    double first = 0;
    for (std::size_t step = 0; step < n; ++step) {
      if (step > 0) {
        const auto& victim = sources[order[step - 1]];
        forget_source(pool, victim.source_id);
        removed[order[step - 1]] = true;
        const auto blob = encode_source_blob(victim);
        for (const auto& f : std::filesystem::directory_iterator(dir)) {
          if (!f.is_regular_file()) continue;
          const auto name = f.path().filename().string();
          if (name == victim.source_id + ".bin" || name == victim.source_id + ".proto.bin")
            throw PoolError("file of forgotten source '" + victim.source_id + "' still present");
          if (read_file(f.path()).find(blob) != std::string::npos)
            throw PoolError("bytes of forgotten source '" + victim.source_id + "' found in " + name);
        }
      }
      // Evaluate the pool as stored on disk, then an independently built
      // pool holding only the surviving sources.
      const auto disk = PromptPool<T>::open(dir);
      std::vector<std::string> ids;
      std::vector<SourcePromptSet<T>> kept;
      for (std::size_t i = 0; i < n; ++i)
        if (!removed[i]) {
          ids.push_back(sources[i].source_id);
          kept.push_back(sources[i].clone());
        }
      const auto fresh = memory_pool<T>(backbone, C, std::move(kept), config.prototypes);
      const auto t0 = Clock::now();
      const auto got = average_probabilities(evaluate_selection(backbone, corpus.test, disk, disk.ids()), C);
      const double ms = ms_since(t0);
      const auto want = average_probabilities(evaluate_selection(backbone, corpus.test, fresh, ids), C);
      if (got.values != want.values)
        throw PoolError("predictions after forgetting differ from a pool built without the removed sources (step " +
                        std::to_string(step) + ")");
      const double acc = accuracy_of(got, corpus.test);
      if (step == 0) first = acc;
      const std::string g = std::to_string(step);
      rep.rows.push_back({rep.scenario, seed, g, "apt", acc, config.timing ? ms : 0.0, flops_composed(fm, n - step)});
      rep.rows.push_back({rep.scenario, seed, g, "error_increase", std::max(0.0, first - acc), 0.0, 0.0});
      say(log, "[forget-curve] seed " + std::to_string(seed) + " removed " + g + " sources, accuracy " + pct(acc));
    }
  }
  rep.notes.push_back("every step matched a freshly built pool and left no bytes of removed sources on disk");
  return rep;
}

// ---------------------------------------------------------------------------
// Continual learning

template <typename T>
ExperimentReport class_incremental(const BackboneParams<T>& backbone, const ExperimentConfig& config,
                                   std::ostream* log) {
  config.validate();
  require_frozen(backbone);
  ExperimentReport rep;
  rep.scenario = "cil";
  rep.config = config;
  const WeightingConfig wc{config.prototypes.beta, WeightingMode::cil, false};
  for (const auto seed : config.seeds) {
    const Corpus corpus = load_corpus(config.data, seed);
    const std::size_t C = corpus.train.class_count;
    const auto fm = flop_model(backbone.config, config.prompt, C);
    const auto eps = split_class_incremental(corpus.train, config.n_episodes);
    auto sources = train_sources<T>(corpus.train, eps, backbone, config.prompt, derive_seed(seed, 2), config.workers);
    parallel_for(eps.size(), config.workers, [&](std::size_t e) {
      SetView v(corpus.train, eps[e].members);
      sources[e].prototypes = build_prototypes(v, backbone, config.prototypes.K, derive_seed(derive_seed(seed, 5), e));
    });
    const auto pool = memory_pool<T>(backbone, C, std::move(sources), config.prototypes);
    const auto ids = ids_of(eps);

    std::vector<int> seen(C, 0);
    for (std::size_t t = 1; t <= eps.size(); ++t) {
      for (int c : eps[t - 1].label_map) seen[static_cast<std::size_t>(c)] = 1;
      const std::vector<std::string> upto(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(t));
      auto t0 = Clock::now();
      const auto sel = evaluate_selection(backbone, corpus.test, pool, upto);
      const double sel_ms = ms_since(t0);
      const auto plain = concat_logits(sel, C).argmax();
      const auto weighted = weighted_scores(sel, selected_prototypes(pool, upto), C, wc).argmax();
      std::size_t total = 0, ok_plain = 0, ok_weighted = 0;
      for (std::size_t i = 0; i < corpus.test.size(); ++i) {
        const int y = corpus.test.labels[i];
        if (!seen[static_cast<std::size_t>(y)]) continue;
        ++total;
        ok_plain += plain[i] == y;
        ok_weighted += weighted[i] == y;
      }
      const double d = static_cast<double>(std::max<std::size_t>(1, total));
      const std::string g = std::to_string(t);
      const double ms = config.timing ? sel_ms : 0.0;
      rep.rows.push_back({rep.scenario, seed, g, "apt", static_cast<double>(ok_plain) / d, ms, flops_composed(fm, t)});
      rep.rows.push_back({rep.scenario, seed, g, "apt_w", static_cast<double>(ok_weighted) / d, ms, flops_composed(fm, t)});
      if (t == eps.size())
        say(log, "[cil] seed " + std::to_string(seed) + " apt " + pct(static_cast<double>(ok_plain) / d) + " apt_w " +
                     pct(static_cast<double>(ok_weighted) / d));
    }
  }
  rep.notes.push_back("group = episodes seen; accuracy over test classes seen so far; final group " +
                      std::to_string(config.n_episodes) + " covers every class");
  return rep;
}

template <typename T>
ExperimentReport domain_incremental(const BackboneParams<T>& backbone, const ExperimentConfig& config,
                                    std::ostream* log) {
  config.validate();
  require_frozen(backbone);
  ExperimentReport rep;
  rep.scenario = "dil";
  rep.config = config;
  bool beta0_agrees = true;
  DataSpec data = config.data;
  if (data.kind == DataSpec::Kind::synthetic) data.synthetic.n_domains = config.dil_domains;
  for (const auto seed : config.seeds) {
    const Corpus corpus = load_corpus(data, seed);
    const std::size_t C = corpus.train.class_count;
    const auto fm = flop_model(backbone.config, config.prompt, C);
    const auto split = split_domains(corpus.train, config.train_domains);
    auto sources =
        train_sources<T>(corpus.train, split.episodes, backbone, config.prompt, derive_seed(seed, 2), config.workers);
    parallel_for(split.episodes.size(), config.workers, [&](std::size_t e) {
      SetView v(corpus.train, split.episodes[e].members);
      sources[e].prototypes = build_prototypes(v, backbone, config.prototypes.K, derive_seed(derive_seed(seed, 5), e));
    });
    const auto pool = memory_pool<T>(backbone, C, std::move(sources), config.prototypes);
    const auto ids = ids_of(split.episodes);

    auto held = split_domains(corpus.test, config.train_domains).test_members;
    std::string group = "heldout";
    if (held.empty()) {
      group = "all";
      held.resize(corpus.test.size());
      for (std::size_t i = 0; i < held.size(); ++i) held[i] = i;
    }
    const LabeledImageSet test = corpus.test.subset(held);
    const auto t0 = Clock::now();
    const auto sel = evaluate_selection(backbone, test, pool, ids);
    const double ms = config.timing ? ms_since(t0) : 0.0;
    const auto protos = selected_prototypes(pool, ids);
    const double fl = flops_composed(fm, ids.size());
    const double apt = accuracy_of(average_probabilities(sel, C), test);
    const auto logit_pool = average_logits(sel, C);
    const double apt_w = accuracy_of(weighted_scores(sel, protos, C, {config.prototypes.beta, WeightingMode::dil, false}), test);
    const auto uniform = weighted_scores(sel, protos, C, {0.0, WeightingMode::dil, false});
    beta0_agrees = beta0_agrees && uniform.argmax() == logit_pool.argmax();
    rep.rows.push_back({rep.scenario, seed, group, "apt", apt, ms, fl});
    rep.rows.push_back({rep.scenario, seed, group, "apt_logits", accuracy_of(logit_pool, test), ms, fl});
    rep.rows.push_back({rep.scenario, seed, group, "apt_w", apt_w, ms, fl});
    say(log, "[dil] seed " + std::to_string(seed) + " apt " + pct(apt) + " apt_w " + pct(apt_w));
  }
  const std::string g = rep.rows.empty() ? "heldout" : rep.rows.front().group;
  rep.notes.push_back("apt_w - apt: " + pct(rep.mean("apt_w", g) - rep.mean("apt", g)));
  rep.notes.push_back(std::string("beta=0 weighting matches the logit-pool argmax: ") + (beta0_agrees ? "yes" : "no"));
  return rep;
}

// ---------------------------------------------------------------------------
// Inference cost

template <typename T>
ExperimentReport bench_compose(const BackboneParams<T>& backbone, const ExperimentConfig& config, std::ostream* log) {
  config.validate();
  require_frozen(backbone);
  ExperimentReport rep;
  rep.scenario = "bench";
  rep.config = config;
  const auto& cfg = backbone.config;
  const std::size_t C = config.data.kind == DataSpec::Kind::synthetic ? config.data.synthetic.n_classes : 10;
  const auto fm = flop_model(cfg, config.prompt, C);
  const std::size_t kmax = *std::max_element(config.bench_sizes.begin(), config.bench_sizes.end());
  const auto seed = config.seeds.front();

  std::vector<SourcePromptSet<T>> sources;
  for (std::size_t i = 0; i < kmax; ++i)
    sources.push_back(SourcePromptSet<T>::init("bench-" + std::to_string(i), config.prompt.prompt, cfg,
                                               identity_label_map(C), backbone.fingerprint(),
                                               derive_seed(derive_seed(seed, 6), i)));
  Rng rng(derive_seed(seed, 7));
  std::vector<std::uint8_t> pixels(config.bench_batch * cfg.image_bytes());
  for (auto& p : pixels) p = static_cast<std::uint8_t>(rng.below(256));
  ImageBatch images;
  for (std::size_t i = 0; i < config.bench_batch; ++i)
    images.emplace_back(pixels.data() + i * cfg.image_bytes(), cfg.image_bytes());
  const auto patches = patchify<T>(images, cfg);

  auto time_of = [&](auto&& fn) {
    std::vector<double> t;
    for (std::size_t r = 0; r < config.bench_repeats; ++r) {
      const auto t0 = Clock::now();
      fn();
      t.push_back(ms_since(t0));
    }
    std::sort(t.begin(), t.end());
    return t[t.size() / 2];
  };

  std::vector<double> xs, ys;
  double composed_max = 0, naive_max = 0;
  NoGradScope<T> no_grad;
  for (const auto k : config.bench_sizes) {
    const SourceList<T> list = [&] {
      SourceList<T> l;
      for (std::size_t i = 0; i < k; ++i) l.push_back(&sources[i]);
      return l;
    }();
    const std::string g = std::to_string(k);
    double tc = 0, tn = 0;
    if (config.timing) {
      tc = time_of([&] { (void)composed_forward(backbone, patches, config.bench_batch, list); });
      tn = time_of([&] { (void)naive_concat_forward(backbone, patches, config.bench_batch, list); });
    }
    if (k == kmax) composed_max = tc, naive_max = tn;
    const double fc = flops_composed(fm, k);
    rep.rows.push_back({rep.scenario, seed, g, "composed", -1, tc, fc});
    rep.rows.push_back({rep.scenario, seed, g, "naive_concat", -1, tn, flops_naive(fm, k)});
    rep.rows.push_back({rep.scenario, seed, g, "ensemble", -1, 0.0, flops_ensemble(fm, k)});
    if (k >= 1) {
      xs.push_back(static_cast<double>(k));
      ys.push_back(fc - flops_composed(fm, 0));
    }
    say(log, "[bench] k " + g + " composed " + pct(tc) + " ms, naive " + pct(tn) + " ms");
  }
  if (xs.size() >= 2) rep.notes.push_back("composed flops delta linear fit r2: " + format_number(linear_fit_r2(xs, ys)));
  rep.notes.push_back("composed flops at k=0 equal backbone-only flops: " +
                      std::string(flops_composed(fm, 0) == flops_backbone(fm) ? "yes" : "no"));
  if (config.timing)
    rep.notes.push_back("wall ms at k=" + std::to_string(kmax) + ": composed " + pct(composed_max) + ", naive " +
                        pct(naive_max));
  return rep;
}

#define APT_INSTANTIATE_HARNESS(T)                                                                               \
  template ExperimentReport shard_sweep<T>(const BackboneParams<T>&, const ExperimentConfig&, std::ostream*);    \
  template ExperimentReport forget_curve<T>(const BackboneParams<T>&, const ExperimentConfig&,                   \
                                            const std::filesystem::path&, std::ostream*);                        \
  template ExperimentReport class_incremental<T>(const BackboneParams<T>&, const ExperimentConfig&,              \
                                                 std::ostream*);                                                 \
  template ExperimentReport domain_incremental<T>(const BackboneParams<T>&, const ExperimentConfig&,             \
                                                  std::ostream*);                                                \
  template ExperimentReport bench_compose<T>(const BackboneParams<T>&, const ExperimentConfig&, std::ostream*);  \
  template SelectionOutput<T> evaluate_selection<T>(const BackboneParams<T>&, const LabeledImageSet&,            \
                                                    const PromptSource<T>&, const std::vector<std::string>&,     \
                                                    std::size_t);

APT_INSTANTIATE_HARNESS(float)
APT_INSTANTIATE_HARNESS(double)

#undef APT_INSTANTIATE_HARNESS

}  // namespace apt
