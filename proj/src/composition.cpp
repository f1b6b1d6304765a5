// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include "apt/composition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "apt/errors.hpp"
#include "apt/io.hpp"

namespace apt {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "apt-prompt-pool/1";

void check_id(const std::string& id) {
  const bool ok = !id.empty() && id.front() != '.' && id.size() <= 128 &&
                  std::all_of(id.begin(), id.end(), [](char c) {
                    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
                  });
  if (!ok) throw ConfigError("source id '" + id + "' must be 1-128 characters of [A-Za-z0-9._-] not starting with '.'");
}

std::string blob_name(const std::string& id) { return id + ".bin"; }
std::string proto_name(const std::string& id) { return id + ".proto.bin"; }

std::string encode_prototypes(const PrototypeSet& p) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, Tensor<double>(Shape{p.k, p.dim}, p.centroids));
  return os.str();
}

template <typename T>
SourcePromptSet<T> decode_source(const std::string& bytes, const std::string& id, const PromptShape& shape,
                                 std::vector<int> label_map, const std::string& fingerprint,
                                 const BackboneConfig& config) {
  std::istringstream in(bytes, std::ios::binary);
  std::vector<Tensor<T>> tensors;
  try {
    while (in.peek() != std::char_traits<char>::eof()) tensors.push_back(read_tensor<T>(in));
  } catch (const FormatError& e) {
    throw FormatError("blob of source '" + id + "': " + e.what());
  }
  if (tensors.size() < 3) throw FormatError("blob of source '" + id + "' holds too few tensors");
  SourcePromptSet<T> s;
  s.source_id = id;
  s.shape = shape;
  s.prompt = tensors.front();
  s.memory.assign(tensors.begin() + 1, tensors.end() - 2);
  s.head.weight = tensors[tensors.size() - 2];
  s.head.bias = tensors.back();
  s.label_map = std::move(label_map);
  s.backbone_fingerprint = fingerprint;
  try {
    s.validate(config);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("pool blob does not fit its manifest: ") + e.what());
  }
  return s;
}

template <typename V>
V field(const Json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw FormatError(where + ": missing field '" + key + "'");
  try {
    return it->template get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": field '" + key + "': " + e.what());
  }
}

}  // namespace

template <typename T>
std::string encode_source_blob(const SourcePromptSet<T>& source) {
  std::ostringstream os(std::ios::binary);
  for (const auto& [name, t] : source.parameters()) write_tensor(os, t);
  return os.str();
}

template <typename T>
PromptPool<T>::PromptPool(std::string name, BackboneConfig backbone, std::string fingerprint, std::size_t n_classes,
                          PoolDefaults defaults)
    : name_(std::move(name)),
      backbone_(backbone),
      fingerprint_(std::move(fingerprint)),
      n_classes_(n_classes),
      defaults_(defaults) {
  backbone_.validate();
  if (n_classes_ == 0) throw ConfigError("a pool needs a positive number of classes");
  if (defaults_.K == 0) throw ConfigError("prototype count K must be positive");
  if (!(defaults_.beta >= 0)) throw ConfigError("beta must be non-negative");
}

template <typename T>
PromptPool<T> PromptPool<T>::create(const fs::path& dir, std::string name, BackboneConfig backbone,
                                    std::string fingerprint, std::size_t n_classes, PoolDefaults defaults) {
  if (fs::exists(dir / "manifest.json")) throw PoolError("pool already exists at " + dir.string());
  PromptPool pool(std::move(name), backbone, std::move(fingerprint), n_classes, defaults);
  fs::create_directories(dir);
  pool.dir_ = dir;
  pool.write_manifest();
  return pool;
}

template <typename T>
PromptPool<T> PromptPool<T>::open(const fs::path& dir) {
  const auto where = (dir / "manifest.json").string();
  if (!fs::exists(dir / "manifest.json")) throw PoolError("no pool manifest at " + where);
  Json j;
  try {
    j = Json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  if (field<std::string>(j, "format", where) != kFormat) throw FormatError(where + ": unsupported pool format");
  BackboneConfig config;
  try {
    config = field<Json>(j, "backbone", where).get<BackboneConfig>();
  } catch (const ConfigError& e) {
    throw FormatError(where + ": " + e.what());
  }
  const auto defaults_json = field<Json>(j, "defaults", where);
  PoolDefaults defaults{field<std::size_t>(defaults_json, "K", where), field<double>(defaults_json, "beta", where)};
  PromptPool pool(field<std::string>(j, "name", where), config, field<std::string>(j, "backbone_fingerprint", where),
                  field<std::size_t>(j, "n_classes", where), defaults);
  pool.dir_ = dir;
  for (const auto& e : field<Json>(j, "sources", where)) {
    const auto id = field<std::string>(e, "id", where);
    const auto entry = where + " source '" + id + "'";
    check_id(id);
    const auto fp = field<std::string>(e, "backbone_fingerprint", entry);
    if (fp != pool.fingerprint_)
      throw StalePromptError("source '" + id + "' was trained against backbone " + fp + " but the pool uses " +
                             pool.fingerprint_);
    PromptShape shape;
    try {
      shape.variant = parse_variant(field<std::string>(e, "variant", entry));
    } catch (const ConfigError& err) {
      throw FormatError(entry + ": " + err.what());
    }
    shape.n_tokens = field<std::size_t>(e, "n_prompt_tokens", entry);
    shape.d_mem = field<std::size_t>(e, "d_mem", entry);
    const auto bytes = read_file(dir / field<std::string>(e, "blob", entry));
    const auto digest = field<std::string>(e, "sha256", entry);
    if (sha256_hex(bytes) != digest) throw FormatError(entry + ": blob digest mismatch");
    auto s = decode_source<T>(bytes, id, shape, field<std::vector<int>>(e, "label_map", entry), fp, config);
    if (auto p = e.find("prototypes"); p != e.end() && !p->is_null()) {
      const auto pbytes = read_file(dir / field<std::string>(*p, "file", entry));
      if (sha256_hex(pbytes) != field<std::string>(*p, "sha256", entry))
        throw FormatError(entry + ": prototype digest mismatch");
      std::istringstream in(pbytes, std::ios::binary);
      const auto c = read_tensor<double>(in);
      if (c.rank() != 2) throw FormatError(entry + ": prototypes must be a matrix");
      PrototypeSet ps;
      ps.k = c.dim(0);
      ps.dim = c.dim(1);
      ps.centroids.assign(c.values().begin(), c.values().end());
      ps.built_from = field<std::string>(*p, "built_from", entry);
      ps.warnings = p->value("warnings", std::vector<std::string>{});
      s.prototypes = std::move(ps);
    }
    if (pool.sources_.contains(id)) throw FormatError(where + ": duplicate source id '" + id + "'");
    pool.order_.push_back(id);
    pool.digests_[id] = digest;
    pool.sources_.emplace(id, std::move(s));
  }
  return pool;
}

template <typename T>
const SourcePromptSet<T>& PromptPool<T>::get(const std::string& id) const {
  auto it = sources_.find(id);
  if (it == sources_.end()) throw LookupError("source '" + id + "' is not in pool '" + name_ + "'");
  return it->second;
}

template <typename T>
void PromptPool<T>::add(SourcePromptSet<T> source) {
  const auto id = source.source_id;
  check_id(id);
  if (sources_.contains(id)) throw CompositionError("source '" + id + "' is already in pool '" + name_ + "'");
  if (source.backbone_fingerprint != fingerprint_)
    throw StalePromptError("source '" + id + "' was trained against backbone " + source.backbone_fingerprint +
                           " but the pool uses " + fingerprint_);
  source.validate(backbone_);
  for (int g : source.label_map)
    if (static_cast<std::size_t>(g) >= n_classes_)
      throw ConfigError("source '" + id + "' maps to class " + std::to_string(g) + " outside the pool's " +
                        std::to_string(n_classes_) + " classes");
  const auto blob = encode_source_blob(source);
  if (dir_) {
    write_file_atomic(*dir_ / blob_name(id), blob);
    if (source.prototypes) write_file_atomic(*dir_ / proto_name(id), encode_prototypes(*source.prototypes));
  }
  for (auto& [name, t] : source.parameters()) const_cast<Tensor<T>&>(t).set_requires_grad(false);
  order_.push_back(id);
  digests_[id] = sha256_hex(blob);
  sources_.emplace(id, std::move(source));
  if (dir_) write_manifest();
}

template <typename T>
void PromptPool<T>::remove(const std::string& id) {
  if (!sources_.contains(id)) throw LookupError("source '" + id + "' is not in pool '" + name_ + "'");
  order_.erase(std::find(order_.begin(), order_.end(), id));
  sources_.erase(id);
  digests_.erase(id);
  if (dir_) {
    write_manifest();
    fs::remove(*dir_ / blob_name(id));
    fs::remove(*dir_ / proto_name(id));
  }
}

template <typename T>
Json PromptPool<T>::manifest() const {
  Json sources = Json::array();
  for (const auto& id : order_) {
    const auto& s = sources_.at(id);
    Json e{{"id", id},
           {"variant", to_string(s.shape.variant)},
           {"n_prompt_tokens", s.shape.n_tokens},
           {"d_mem", s.shape.d_mem},
           {"label_map", s.label_map},
           {"backbone_fingerprint", s.backbone_fingerprint},
           {"blob", blob_name(id)},
           {"sha256", digests_.at(id)},
           {"prototypes", nullptr}};
    if (s.prototypes)
      e["prototypes"] = Json{{"file", proto_name(id)},
                             {"k", s.prototypes->k},
                             {"dim", s.prototypes->dim},
                             {"built_from", s.prototypes->built_from},
                             {"warnings", s.prototypes->warnings},
                             {"sha256", sha256_hex(encode_prototypes(*s.prototypes))}};
    sources.push_back(std::move(e));
  }
  return Json{{"format", kFormat},
              {"name", name_},
              {"backbone_fingerprint", fingerprint_},
              {"backbone", backbone_},
              {"n_classes", n_classes_},
              {"defaults", {{"K", defaults_.K}, {"beta", defaults_.beta}}},
              {"sources", std::move(sources)}};
}

template <typename T>
void PromptPool<T>::write_manifest() const {
  write_file_atomic(*dir_ / "manifest.json", manifest().dump(2) + "\n");
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::vector<const SourcePromptSet<T>*> fetch(const PromptSource<T>& pool, const std::vector<std::string>& ids) {
  if (ids.empty()) throw SelectionError("the selected subset is empty");
  std::set<std::string> seen;
  std::vector<const SourcePromptSet<T>*> out;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw SelectionError("source '" + id + "' is selected twice");
    out.push_back(&pool.get(id));
  }
  return out;
}

template <typename T>
SelectionOutput<T> heads_over(const BackboneParams<T>& backbone, const BackboneOutput<T>& cache,
                              const std::vector<const SourcePromptSet<T>*>& sources) {
  SelectionOutput<T> out;
  out.batch = cache.batch;
  out.class_embedding = class_embedding(backbone, cache);
  for (const auto* s : sources) {
    const auto p = prompt_forward(backbone, cache, *s);
    out.ids.push_back(s->source_id);
    out.label_maps.push_back(s->label_map);
    out.logits.push_back(predict_source(prompt_features(backbone, p, cache.batch), s->head, false));
  }
  return out;
}

std::vector<double> softmax_row(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> e(z.size());
  double sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += e[i] = std::exp(z[i] - m);
  for (auto& x : e) x /= sum;
  return e;
}

template <typename T>
std::vector<double> logit_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t n = logits.cols();
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<double>(logits[row * n + j]);
  return out;
}

void check_class(int g, std::size_t n_classes) {
  if (g < 0 || static_cast<std::size_t>(g) >= n_classes)
    throw ConfigError("global class " + std::to_string(g) + " outside [0, " + std::to_string(n_classes) + ")");
}

}  // namespace

template <typename T>
SelectionOutput<T> select_and_forward(const BackboneParams<T>& backbone, const Tensor<T>& patches,
                                      std::size_t batch, const PromptSource<T>& pool,
                                      const std::vector<std::string>& ids) {
  const auto sources = fetch(pool, ids);
  require_fingerprints<T>(backbone, sources);
  NoGradScope<T> no_grad;
  return heads_over(backbone, forward_backbone(backbone, patches, batch, true), sources);
}

template <typename T>
SelectionOutput<T> select_and_forward(const BackboneParams<T>& backbone, const BackboneOutput<T>& cache,
                                      const PromptSource<T>& pool, const std::vector<std::string>& ids) {
  const auto sources = fetch(pool, ids);
  require_fingerprints<T>(backbone, sources);
  if (cache.layers.size() != backbone.blocks.size())
    throw ConfigError("the Phase-1 cache does not hold per-layer keys and values");
  NoGradScope<T> no_grad;
  return heads_over(backbone, cache, sources);
}

std::vector<int> ScoreMatrix::argmax() const {
  std::vector<int> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto r = row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

template <typename T>
ScoreMatrix average_probabilities(const SelectionOutput<T>& out, std::size_t n_classes) {
  ScoreMatrix m{out.batch, n_classes, std::vector<double>(out.batch * n_classes, 0.0)};
  const double w = 1.0 / static_cast<double>(out.logits.size());
  for (std::size_t s = 0; s < out.logits.size(); ++s)
    for (std::size_t i = 0; i < out.batch; ++i) {
      const auto p = softmax_row(logit_row(out.logits[s], i));
      for (std::size_t j = 0; j < p.size(); ++j) {
        check_class(out.label_maps[s][j], n_classes);
        m.values[i * n_classes + out.label_maps[s][j]] += w * p[j];
      }
    }
  return m;
}

template <typename T>
ScoreMatrix average_logits(const SelectionOutput<T>& out, std::size_t n_classes) {
  ScoreMatrix m{out.batch, n_classes, std::vector<double>(out.batch * n_classes, 0.0)};
  const double w = 1.0 / static_cast<double>(out.logits.size());
  for (std::size_t s = 0; s < out.logits.size(); ++s)
    for (std::size_t i = 0; i < out.batch; ++i) {
      const auto z = logit_row(out.logits[s], i);
      for (std::size_t j = 0; j < z.size(); ++j) {
        check_class(out.label_maps[s][j], n_classes);
        m.values[i * n_classes + out.label_maps[s][j]] += w * z[j];
      }
    }
  return m;
}

template <typename T>
std::vector<int> majority_vote(const SelectionOutput<T>& out, std::size_t n_classes) {
  std::vector<int> result(out.batch);
  std::vector<std::size_t> votes(n_classes);
  for (std::size_t i = 0; i < out.batch; ++i) {
    std::fill(votes.begin(), votes.end(), 0);
    for (std::size_t s = 0; s < out.logits.size(); ++s) {
      const auto z = logit_row(out.logits[s], i);
      const int g = out.label_maps[s][std::max_element(z.begin(), z.end()) - z.begin()];
      check_class(g, n_classes);
      ++votes[g];
    }
    result[i] = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return result;
}

template <typename T>
ScoreMatrix concat_logits(const SelectionOutput<T>& out, std::size_t n_classes, const std::vector<double>& temperatures) {
  if (!temperatures.empty() && temperatures.size() != out.logits.size())
    throw ConfigError("expected one temperature per selected source");
  std::vector<int> owner(n_classes, -1);
  for (std::size_t s = 0; s < out.label_maps.size(); ++s)
    for (int g : out.label_maps[s]) {
      check_class(g, n_classes);
      if (owner[g] >= 0)
        throw CompositionError("sources '" + out.ids[owner[g]] + "' and '" + out.ids[s] + "' both cover class " +
                               std::to_string(g));
      owner[g] = static_cast<int>(s);
    }
  ScoreMatrix m{out.batch, n_classes,
                std::vector<double>(out.batch * n_classes, -std::numeric_limits<double>::infinity())};
  for (std::size_t s = 0; s < out.logits.size(); ++s) {
    const double t = temperatures.empty() ? 1.0 : temperatures[s];
    if (!(t > 0)) throw ConfigError("temperatures must be positive");
    for (std::size_t i = 0; i < out.batch; ++i) {
      const auto z = logit_row(out.logits[s], i);
      for (std::size_t j = 0; j < z.size(); ++j) m.values[i * n_classes + out.label_maps[s][j]] = z[j] / t;
    }
  }
  return m;
}

template <typename T>
ScoreMatrix apt_predict(const BackboneParams<T>& backbone, const Tensor<T>& patches, std::size_t batch,
                        const PromptSource<T>& pool, const std::vector<std::string>& ids) {
  return average_probabilities(select_and_forward(backbone, patches, batch, pool, ids), pool.n_classes());
}

template <typename T>
std::vector<int> majority_vote_predict(const BackboneParams<T>& backbone, const Tensor<T>& patches,
                                       std::size_t batch, const PromptSource<T>& pool,
                                       const std::vector<std::string>& ids) {
  return majority_vote(select_and_forward(backbone, patches, batch, pool, ids), pool.n_classes());
}

template <typename T>
std::vector<int> cil_predict(const BackboneParams<T>& backbone, const Tensor<T>& patches, std::size_t batch,
                             const PromptSource<T>& pool, const std::vector<std::string>& ids) {
  return concat_logits(select_and_forward(backbone, patches, batch, pool, ids), pool.n_classes()).argmax();
}

namespace {

void add_distribution(ScoreMatrix& m, std::span<const double> probs, std::size_t row, const std::vector<int>& map,
                      double w) {
  for (std::size_t j = 0; j < map.size(); ++j) {
    check_class(map[j], m.cols);
    m.values[row * m.cols + map[j]] += w * probs[j];
  }
}

}  // namespace

template <typename T>
ScoreMatrix ensemble_finetuned(const std::vector<const FinetunedModel<T>*>& models, const Tensor<T>& patches,
                               std::size_t batch, std::size_t n_classes) {
  if (models.empty()) throw SelectionError("no models to ensemble");
  NoGradScope<T> no_grad;
  ScoreMatrix m{batch, n_classes, std::vector<double>(batch * n_classes, 0.0)};
  const double w = 1.0 / static_cast<double>(models.size());
  for (const auto* model : models) {
    const auto probs = predict_finetuned(*model, patches, batch);
    for (std::size_t i = 0; i < batch; ++i) add_distribution(m, logit_row(probs, i), i, model->label_map, w);
  }
  return m;
}

template <typename T>
ScoreMatrix ensemble_heads(const BackboneParams<T>& backbone, const std::vector<const HeadModel<T>*>& heads,
                           const Tensor<T>& patches, std::size_t batch, std::size_t n_classes) {
  if (heads.empty()) throw SelectionError("no heads to ensemble");
  NoGradScope<T> no_grad;
  const auto feats = class_embedding(backbone, forward_backbone(backbone, patches, batch, false));
  ScoreMatrix m{batch, n_classes, std::vector<double>(batch * n_classes, 0.0)};
  const double w = 1.0 / static_cast<double>(heads.size());
  for (const auto* h : heads) {
    const auto logits = linear(feats, h->head.weight, h->head.bias);
    for (std::size_t i = 0; i < batch; ++i) add_distribution(m, softmax_row(logit_row(logits, i)), i, h->label_map, w);
  }
  return m;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw DimensionError("prediction and label counts differ");
  if (labels.empty()) return 0.0;
  std::size_t right = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) right += predicted[i] == labels[i];
  return static_cast<double>(right) / static_cast<double>(labels.size());
}

#define APT_INSTANTIATE_COMPOSITION(T)                                                                            \
  template class PromptPool<T>;                                                                                   \
  template std::string encode_source_blob<T>(const SourcePromptSet<T>&);                                          \
  template SelectionOutput<T> select_and_forward<T>(const BackboneParams<T>&, const Tensor<T>&, std::size_t,      \
                                                    const PromptSource<T>&, const std::vector<std::string>&);     \
  template SelectionOutput<T> select_and_forward<T>(const BackboneParams<T>&, const BackboneOutput<T>&,           \
                                                    const PromptSource<T>&, const std::vector<std::string>&);     \
  template ScoreMatrix average_probabilities<T>(const SelectionOutput<T>&, std::size_t);                          \
  template ScoreMatrix average_logits<T>(const SelectionOutput<T>&, std::size_t);                                 \
  template std::vector<int> majority_vote<T>(const SelectionOutput<T>&, std::size_t);                             \
  template ScoreMatrix concat_logits<T>(const SelectionOutput<T>&, std::size_t, const std::vector<double>&);      \
  template ScoreMatrix apt_predict<T>(const BackboneParams<T>&, const Tensor<T>&, std::size_t,                    \
                                      const PromptSource<T>&, const std::vector<std::string>&);                   \
  template std::vector<int> majority_vote_predict<T>(const BackboneParams<T>&, const Tensor<T>&, std::size_t,     \
                                                     const PromptSource<T>&, const std::vector<std::string>&);    \
  template std::vector<int> cil_predict<T>(const BackboneParams<T>&, const Tensor<T>&, std::size_t,               \
                                           const PromptSource<T>&, const std::vector<std::string>&);              \
  template ScoreMatrix ensemble_finetuned<T>(const std::vector<const FinetunedModel<T>*>&, const Tensor<T>&,      \
                                             std::size_t, std::size_t);                                           \
  template ScoreMatrix ensemble_heads<T>(const BackboneParams<T>&, const std::vector<const HeadModel<T>*>&,       \
                                         const Tensor<T>&, std::size_t, std::size_t);

APT_INSTANTIATE_COMPOSITION(float)
APT_INSTANTIATE_COMPOSITION(double)

#undef APT_INSTANTIATE_COMPOSITION

}  // namespace apt
