// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors
//
// apt: pretrain a backbone, train and pool per-source prompts, compose them
// and run the experiment scenarios.
//
// Exit codes: 0 ok, 1 other failure, 2 config, 3 data, 4 pool or fingerprint.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "apt/harness.hpp"
#include "apt/io.hpp"
#include "apt/random.hpp"

namespace fs = std::filesystem;
using namespace apt;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::size_t> workers;
  bool f64 = false;
  std::string backbone;
  bool quiet = false;
};

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig c = g.config.empty() ? ExperimentConfig::defaults() : load_experiment_config(g.config);
  if (g.seed) c.seeds = {*g.seed};
  if (g.workers) c.workers = *g.workers;
  if (!g.backbone.empty()) c.backbone_path = g.backbone;
  c.validate();
  return c;
}

std::ostream* log_of(const Globals& g) { return g.quiet ? nullptr : &std::cerr; }

BackboneParams<float> require_backbone(const ExperimentConfig& c) {
  if (c.backbone_path.empty()) throw ConfigError("no backbone given (use --backbone or backbone_path)");
  return load_backbone(c.backbone_path);
}

std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

void finish(const ExperimentReport& rep, const Globals& g) {
  rep.save(g.out);
  rep.write_summary(std::cout);
  std::cout << "report written to " << (fs::path(g.out) / "report.csv").string() << '\n';
}

template <typename T>
ExperimentReport run_scenario(const std::string& verb, const BackboneParams<T>& b, const ExperimentConfig& c,
                              const Globals& g) {
  if (verb == "shard-sweep") return shard_sweep(b, c, log_of(g));
  if (verb == "forget-curve") return forget_curve(b, c, fs::path(g.out) / "pool", log_of(g));
  if (verb == "cil") return class_incremental(b, c, log_of(g));
  if (verb == "dil") return domain_incremental(b, c, log_of(g));
  return bench_compose(b, c, log_of(g));
}

struct TrainArgs {
  std::string pool;
  std::string id;
  std::size_t shard = 0, n_shards = 1;
  std::optional<std::size_t> episode;
  std::optional<int> domain;
  bool prototypes = false;
};

template <typename T>
void train_into_pool(const BackboneParams<T>& b, const ExperimentConfig& c, const TrainArgs& a) {
  const auto seed = c.seeds.front();
  const Corpus corpus = load_corpus(c.data, seed);
  EpisodeSpec ep;
  if (a.episode) {
    const auto eps = split_class_incremental(corpus.train, c.n_episodes);
    if (*a.episode >= eps.size()) throw ConfigError("episode index out of range");
    ep = eps[*a.episode];
  } else if (a.domain) {
    ep = split_domains(corpus.train, {*a.domain}).episodes.at(0);
  } else {
    const auto shards = shard_uniform(corpus.train, a.n_shards, derive_seed(seed, 1000 + a.n_shards));
    if (a.shard >= shards.size()) throw ConfigError("shard index out of range");
    ep = shards[a.shard];
  }
  const std::string id = a.id.empty() ? ep.name : a.id;
  SetView view(corpus.train, ep.members);
  TrainConfig tc = c.prompt;
  tc.seed = derive_seed(derive_seed(seed, 2), a.episode ? *a.episode : a.shard);
  auto source = train_prompt<T>(view, b, ep.label_map, id, tc);
  if (a.prototypes) source.prototypes = build_prototypes(view, b, c.prototypes.K, derive_seed(seed, 5));
  auto pool = fs::exists(fs::path(a.pool) / "manifest.json")
                  ? PromptPool<T>::open(a.pool)
                  : PromptPool<T>::create(a.pool, fs::path(a.pool).filename().string(), b.config, b.fingerprint(),
                                          corpus.train.class_count, c.prototypes);
  pool.add(std::move(source));
  std::cout << "added '" << id << "' (" << view.size() << " samples) to " << a.pool << '\n';
}

struct ComposeArgs {
  std::string pool;
  std::string ids;
  std::string method = "apt";
};

template <typename T>
ScoreMatrix compose_scores(const BackboneParams<T>& b, const ExperimentConfig& c, const ComposeArgs& a,
                           const LabeledImageSet& test) {
  const auto pool = PromptPool<T>::open(a.pool);
  const auto ids = a.ids.empty() ? pool.ids() : split_ids(a.ids);
  const auto sel = evaluate_selection(b, test, pool, ids);
  const std::size_t C = pool.n_classes();
  const auto m = parse_method(a.method);
  switch (m) {
    case Method::apt: return average_probabilities(sel, C);
    case Method::apt_logits: return average_logits(sel, C);
    case Method::majority_vote: {
      const auto v = majority_vote(sel, C);
      ScoreMatrix s{v.size(), C, std::vector<double>(v.size() * C, 0.0)};
      for (std::size_t i = 0; i < v.size(); ++i) s.values[i * C + static_cast<std::size_t>(v[i])] = 1.0;
      return s;
    }
    case Method::apt_w: {
      // Disjoint label maps mean class-incremental weighting, shared ones domain weighting.
      bool disjoint = true;
      std::vector<int> seen(C, 0);
      for (const auto& lm : sel.label_maps)
        for (int k : lm) disjoint = disjoint && !seen[static_cast<std::size_t>(k)]++;
      const WeightingConfig wc{c.prototypes.beta, disjoint ? WeightingMode::cil : WeightingMode::dil, false};
      return weighted_scores(sel, selected_prototypes(pool, ids), C, wc);
    }
    default:
      throw ConfigError("method '" + a.method + "' is not available for composition (use apt, apt_logits, "
                        "majority_vote or apt_w)");
  }
}

template <typename T>
void compose_verb(const BackboneParams<T>& b, const ExperimentConfig& c, const ComposeArgs& a, const Globals& g,
                  bool write_predictions) {
  const Corpus corpus = load_corpus(c.data, c.seeds.front());
  const auto scores = compose_scores(b, c, a, corpus.test);
  const auto pred = scores.argmax();
  std::cout << "accuracy " << format_number(accuracy(pred, corpus.test.labels)) << " on " << corpus.test.size()
            << " test samples\n";
  if (!write_predictions) return;
  std::ostringstream csv;
  csv << "index,label,prediction\n";
  for (std::size_t i = 0; i < pred.size(); ++i) csv << i << ',' << corpus.test.labels[i] << ',' << pred[i] << '\n';
  fs::create_directories(g.out);
  write_file_atomic(fs::path(g.out) / "predictions.csv", csv.str());
  std::cout << "predictions written to " << (fs::path(g.out) / "predictions.csv").string() << '\n';
}

int run(int argc, char** argv) {
  CLI::App app{"a-la-carte prompt tuning engine"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "run a single seed");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--workers", g.workers, "concurrent training jobs");
  app.add_flag("--f64", g.f64, "run in 64-bit precision");
  app.add_option("--backbone", g.backbone, "backbone checkpoint directory");
  app.add_flag("-q,--quiet", g.quiet, "no progress lines");

  auto* pretrain = app.add_subcommand("pretrain", "pretrain a backbone on the proxy corpus");
  TrainArgs ta;
  auto* train = app.add_subcommand("train-prompt", "train one source prompt and add it to a pool");
  train->add_option("--pool", ta.pool, "pool directory")->required();
  train->add_option("--id", ta.id, "source id");
  train->add_option("--shard", ta.shard, "shard index");
  train->add_option("--n-shards", ta.n_shards, "number of uniform shards");
  train->add_option("--episode", ta.episode, "class-incremental episode index");
  train->add_option("--domain", ta.domain, "train on one domain");
  train->add_flag("--prototypes", ta.prototypes, "also build K-means prototypes");

  ComposeArgs ca;
  auto* compose = app.add_subcommand("compose", "predict the test set with a selection of sources");
  auto* eval = app.add_subcommand("eval", "accuracy of a selection of sources on the test set");
  for (auto* sc : {compose, eval}) {
    sc->add_option("--pool", ca.pool, "pool directory")->required();
    sc->add_option("--ids", ca.ids, "comma-separated source ids (default: all)");
    sc->add_option("--method", ca.method, "apt, apt_logits, majority_vote or apt_w")->capture_default_str();
  }

  std::vector<CLI::App*> scenarios{app.add_subcommand("shard-sweep", "uniform sharding sweep"),
                                   app.add_subcommand("forget-curve", "remove sources one at a time"),
                                   app.add_subcommand("cil", "class-incremental episodes"),
                                   app.add_subcommand("dil", "domain-incremental episodes"),
                                   app.add_subcommand("bench", "inference cost of composition")};
  bool no_timing = false;
  scenarios.back()->add_flag("--no-timing", no_timing, "skip wall-clock measurements");

  auto* pool_cmd = app.add_subcommand("pool", "inspect or edit a prompt pool");
  pool_cmd->require_subcommand(1);
  std::string pool_dir, from_dir, pool_id;
  auto* pool_add = pool_cmd->add_subcommand("add", "copy a source from another pool");
  pool_add->add_option("--pool", pool_dir)->required();
  pool_add->add_option("--from", from_dir, "source pool")->required();
  pool_add->add_option("--id", pool_id)->required();
  auto* pool_rm = pool_cmd->add_subcommand("rm", "forget a source");
  pool_rm->add_option("--pool", pool_dir)->required();
  pool_rm->add_option("--id", pool_id)->required();
  auto* pool_ls = pool_cmd->add_subcommand("ls", "list sources");
  pool_ls->add_option("--pool", pool_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorFamily::config);
  }

  if (pool_cmd->parsed()) {
    if (pool_ls->parsed()) {
      const auto pool = PromptPool<float>::open(pool_dir);
      std::cout << pool.manifest().dump(2) << '\n';
    } else if (pool_rm->parsed()) {
      auto pool = PromptPool<float>::open(pool_dir);
      forget_source(pool, pool_id);
      std::cout << "removed '" << pool_id << "'\n";
    } else {
      const auto from = PromptPool<float>::open(from_dir);
      auto pool = PromptPool<float>::open(pool_dir);
      add_source(pool, from.get(pool_id).clone());
      std::cout << "added '" << pool_id << "'\n";
    }
    return 0;
  }

  ExperimentConfig c = load_config(g);
  if (pretrain->parsed()) {
    c.backbone_path.clear();
    const auto b = obtain_backbone(c, log_of(g));
    save_backbone(b, g.out);
    std::cout << "fingerprint " << b.fingerprint() << '\n' << "checkpoint written to " << g.out << '\n';
    return 0;
  }
  if (train->parsed()) {
    const auto b = require_backbone(c);
    if (g.f64)
      train_into_pool(b.cast<double>(), c, ta);
    else
      train_into_pool(b, c, ta);
    return 0;
  }
  if (compose->parsed() || eval->parsed()) {
    const auto b = require_backbone(c);
    if (g.f64)
      compose_verb(b.cast<double>(), c, ca, g, compose->parsed());
    else
      compose_verb(b, c, ca, g, compose->parsed());
    return 0;
  }
  for (auto* sc : scenarios) {
    if (!sc->parsed()) continue;
    if (sc->get_name() == "bench") c.timing = !no_timing;
    const auto b = obtain_backbone(c, log_of(g));
    const auto rep = g.f64 ? run_scenario(sc->get_name(), b.cast<double>(), c, g) : run_scenario(sc->get_name(), b, c, g);
    finish(rep, g);
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const apt::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
