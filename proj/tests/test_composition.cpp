// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <set>

#include "apt/composition.hpp"
#include "apt/errors.hpp"
#include "apt/io.hpp"

using namespace apt;
namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

BackboneConfig tiny_config() {
  BackboneConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

template <typename T>
BackboneParams<T> backbone(std::uint64_t seed = 1) {
  auto p = BackboneParams<T>::init(tiny_config(), seed);
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : p.named_parameters())
    if (name.ends_with("weight") && name.find("ln") == std::string::npos && name.find("norm") == std::string::npos) {
      std::normal_distribution<double> n(0.0, std::sqrt(1.0 / static_cast<double>(t.cols())));
      for (auto& x : const_cast<Tensor<T>&>(t).values()) x = static_cast<T>(n(rng));
    }
  p.freeze();
  return p;
}

template <typename T>
SourcePromptSet<T> source(const BackboneParams<T>& bb, const std::string& id, std::uint64_t seed,
                          std::vector<int> labels = {0, 1, 2, 3}) {
  auto s = SourcePromptSet<T>::init(id, {}, bb.config, std::move(labels), bb.fingerprint(), seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& [name, t] : s.parameters())
    for (auto& x : const_cast<Tensor<T>&>(t).values()) x = static_cast<T>(n(rng));
  return s;
}

template <typename T>
Tensor<T> random_patches(const BackboneConfig& c, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::uint8_t>> imgs(n, std::vector<std::uint8_t>(c.image_bytes()));
  ImageBatch batch;
  for (auto& img : imgs) {
    for (auto& b : img) b = static_cast<std::uint8_t>(rng() & 0xFF);
    batch.push_back(img);
  }
  return patchify<T>(batch, c);
}

SelectionOutput<double> hand_set(std::vector<std::vector<double>> logits, std::vector<std::vector<int>> maps) {
  SelectionOutput<double> out;
  out.batch = 1;
  for (std::size_t s = 0; s < logits.size(); ++s) {
    out.ids.push_back("s" + std::to_string(s));
    out.logits.emplace_back(Shape{1, logits[s].size()}, logits[s]);
    out.label_maps.push_back(maps[s]);
  }
  return out;
}

// Records every id that prediction code asks for.
template <typename T>
class TrackingSource : public PromptSource<T> {
 public:
  explicit TrackingSource(const PromptSource<T>& inner) : inner_(inner) {}
  const SourcePromptSet<T>& get(const std::string& id) const override {
    reads.insert(id);
    return inner_.get(id);
  }
  bool contains(const std::string& id) const override { return inner_.contains(id); }
  std::vector<std::string> ids() const override { return inner_.ids(); }
  std::size_t n_classes() const override { return inner_.n_classes(); }
  mutable std::set<std::string> reads;

 private:
  const PromptSource<T>& inner_;
};

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("apt_test_" + name);
  fs::remove_all(dir);
  return dir;
}

bool directory_contains(const fs::path& dir, const std::string& needle) {
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && read_file(e.path()).find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST_CASE("probability averaging on hand-set logits") {
  // Uniform over four classes plus a one-hot: exact binary fractions.
  const auto out = hand_set({{0, 0, 0, 0}, {0, -kInf, -kInf, -kInf}}, {{0, 1, 2, 3}, {0, 1, 2, 3}});
  const auto m = average_probabilities(out, 4);
  CHECK(m.values == std::vector<double>{0.625, 0.125, 0.125, 0.125});

  const auto sym = average_probabilities(hand_set({{4, 0}, {0, 4}}, {{0, 1}, {0, 1}}), 2);
  CHECK(sym.values[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(sym.values[1] == doctest::Approx(0.5).epsilon(1e-15));

  // Partial label maps land in the right global slots.
  const auto part = average_probabilities(hand_set({{0, 0}, {0, 0}}, {{3, 1}, {1, 0}}), 4);
  CHECK(part.values == std::vector<double>{0.25, 0.5, 0.0, 0.25});

  // Random property sweep against an independent oracle.
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng() % 6;
    std::vector<std::vector<double>> logits(k, std::vector<double>(5));
    std::vector<std::vector<int>> maps(k, {0, 1, 2, 3, 4});
    std::vector<double> expect(5, 0.0);
    for (auto& z : logits) {
      double sum = 0;
      for (auto& x : z) sum += std::exp(x = n(rng));
      for (std::size_t j = 0; j < 5; ++j) expect[j] += std::exp(z[j]) / sum / static_cast<double>(k);
    }
    const auto got = average_probabilities(hand_set(logits, maps), 5);
    double total = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(got.values[j] == doctest::Approx(expect[j]).epsilon(1e-12));
      total += got.values[j];
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("majority vote with lowest-index tie-break") {
  const std::vector<int> ident{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  auto one_hot = [](int c) {
    std::vector<double> z(10, 0.0);
    z[c] = 1.0;
    return z;
  };
  CHECK(majority_vote(hand_set({one_hot(4), one_hot(4), one_hot(4)}, {ident, ident, ident}), 10) ==
        std::vector<int>{4});
  CHECK(majority_vote(hand_set({one_hot(0), one_hot(1)}, {ident, ident}), 10) == std::vector<int>{0});
  CHECK(majority_vote(hand_set({one_hot(1), one_hot(0)}, {ident, ident}), 10) == std::vector<int>{0});
  CHECK(majority_vote(hand_set({one_hot(2), one_hot(2), one_hot(7), one_hot(7), one_hot(7)},
                               {ident, ident, ident, ident, ident}),
                      10) == std::vector<int>{7});
  // A source's local argmax is voted through its label map.
  CHECK(majority_vote(hand_set({{0, 1}, {1, 0}, {0, 1}}, {{5, 8}, {8, 2}, {3, 8}}), 10) == std::vector<int>{8});
}

TEST_CASE("class-incremental concatenation") {
  const auto out = hand_set({{1, 5}, {3, 2}}, {{0, 1}, {2, 3}});
  const auto m = concat_logits(out, 4);
  CHECK(m.values == std::vector<double>{1, 5, 3, 2});
  // Enumeration oracle: the best (episode, local class) pair.
  int best = -1;
  double top = -kInf;
  const std::vector<std::vector<double>> z{{1, 5}, {3, 2}};
  const std::vector<std::vector<int>> maps{{0, 1}, {2, 3}};
  for (std::size_t e = 0; e < 2; ++e)
    for (std::size_t c = 0; c < 2; ++c)
      if (z[e][c] > top) top = z[e][c], best = maps[e][c];
  CHECK(m.argmax() == std::vector<int>{best});
  CHECK(best == 1);

  // Uncovered classes never win.
  const auto gap = concat_logits(hand_set({{-9, -8}}, {{4, 6}}), 8);
  CHECK(gap.values[0] == -kInf);
  CHECK(gap.argmax() == std::vector<int>{6});
  // One episode: its own argmax.
  CHECK(concat_logits(hand_set({{0.5, 2.5, 1.0}}, {{7, 2, 9}}), 10).argmax() == std::vector<int>{2});
  // Temperature hook.
  const auto hot = concat_logits(out, 4, {1.0, 0.25});
  CHECK(hot.values == std::vector<double>{1, 5, 12, 8});
  CHECK(hot.argmax() == std::vector<int>{2});

  CHECK_THROWS_AS(concat_logits(hand_set({{1, 2}, {3, 4}}, {{0, 1}, {1, 2}}), 4), CompositionError);
  CHECK_THROWS_AS(concat_logits(out, 4, {1.0}), ConfigError);
}

TEST_CASE("pool predictions read only the selected sources") {
  const auto bb = backbone<double>();
  PromptPool<double> pool("p", bb.config, bb.fingerprint(), 4);
  for (int i = 0; i < 5; ++i) pool.add(source(bb, "s" + std::to_string(i), 10 + i));
  const auto patches = random_patches<double>(bb.config, 6, 3);

  TrackingSource<double> tracked(pool);
  const auto m = apt_predict(bb, patches, 6, tracked, {"s3", "s1"});
  CHECK(tracked.reads == std::set<std::string>{"s1", "s3"});
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0;
    for (double p : m.row(i)) total += p;
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  // Permutation invariance.
  const auto swapped = apt_predict(bb, patches, 6, pool, {"s1", "s3"});
  for (std::size_t j = 0; j < m.values.size(); ++j) CHECK(m.values[j] == doctest::Approx(swapped.values[j]).epsilon(1e-15));

  // |I| = 1 is that source's own distribution.
  const auto single = apt_predict(bb, patches, 6, pool, {"s2"});
  {
    NoGradScope<double> ng;
    const auto out = composed_forward(bb, patches, 6, SourceList<double>{&pool.get("s2")});
    const auto probs = predict_source(prompt_features(bb, out.prompts[0], 6), pool.get("s2").head, true);
    for (std::size_t j = 0; j < probs.numel(); ++j) CHECK(single.values[j] == doctest::Approx(probs[j]).epsilon(1e-14));
  }

  tracked.reads.clear();
  majority_vote_predict(bb, patches, 6, tracked, {"s4"});
  CHECK(tracked.reads == std::set<std::string>{"s4"});

  CHECK_THROWS_AS(apt_predict(bb, patches, 6, pool, {}), SelectionError);
  CHECK_THROWS_AS(apt_predict(bb, patches, 6, pool, {"s1", "s1"}), SelectionError);
  CHECK_THROWS_AS(apt_predict(bb, patches, 6, pool, {"s9"}), LookupError);

  // Cached Phase 1 gives the same logits as the direct path.
  NoGradScope<double> ng;
  const auto cache = forward_backbone(bb, patches, 6, true);
  const auto a = select_and_forward(bb, cache, pool, {"s0", "s4"});
  const auto b = select_and_forward(bb, patches, 6, pool, {"s0", "s4"});
  CHECK(std::ranges::equal(a.logits[1].values(), b.logits[1].values()));
  CHECK(std::ranges::equal(a.class_embedding.values(), b.class_embedding.values()));
}

TEST_CASE("pool membership rules") {
  const auto bb = backbone<float>();
  PromptPool<float> pool("p", bb.config, bb.fingerprint(), 10);
  pool.add(source(bb, "a", 1));
  CHECK_THROWS_AS(pool.add(source(bb, "a", 2)), CompositionError);
  const auto other = backbone<float>(2);
  CHECK_THROWS_AS(pool.add(source(other, "b", 2)), StalePromptError);
  CHECK_THROWS_AS(pool.add(source(bb, "../x", 2)), ConfigError);
  CHECK_THROWS_AS(pool.add(source(bb, "c", 2, {3, 10})), ConfigError);
  CHECK_THROWS_AS(pool.remove("zzz"), LookupError);
  CHECK_THROWS_AS(pool.get("zzz"), LookupError);
  CHECK(pool.ids() == std::vector<std::string>{"a"});
}

TEST_CASE("pool directory round trip, forgetting and tamper detection") {
  const auto dir = scratch_dir("pool");
  const auto bb = backbone<float>();
  auto pool = PromptPool<float>::create(dir, "demo", bb.config, bb.fingerprint(), 4);
  CHECK_THROWS_AS(PromptPool<float>::create(dir, "again", bb.config, bb.fingerprint(), 4), PoolError);
  auto with_protos = source(bb, "b", 21);
  with_protos.prototypes = PrototypeSet{2, 8, std::vector<double>(16, 0.5), bb.fingerprint(), {}};
  pool.add(source(bb, "a", 20));
  const auto manifest_before = read_file(dir / "manifest.json");
  pool.add(with_protos);
  pool.add(source(bb, "c", 22));
  CHECK(fs::exists(dir / "b.bin"));
  CHECK(fs::exists(dir / "b.proto.bin"));

  const auto reopened = PromptPool<float>::open(dir);
  CHECK(reopened.ids() == std::vector<std::string>{"a", "b", "c"});
  CHECK(reopened.get("b").prototypes.has_value());
  CHECK(reopened.get("b").prototypes->centroids == with_protos.prototypes->centroids);
  const auto patches = random_patches<float>(bb.config, 5, 8);
  CHECK(apt_predict(bb, patches, 5, reopened, {"a", "b", "c"}).values ==
        apt_predict(bb, patches, 5, pool, {"a", "b", "c"}).values);

  // Forgetting "b" leaves exactly the pool that never had it.
  const std::string b_blob = encode_source_blob(pool.get("b"));
  const std::string b_head(reinterpret_cast<const char*>(pool.get("b").head.weight.data()), 32);
  forget_source(pool, "b");
  CHECK_FALSE(fs::exists(dir / "b.bin"));
  CHECK_FALSE(fs::exists(dir / "b.proto.bin"));
  CHECK_FALSE(directory_contains(dir, b_blob));
  CHECK_FALSE(directory_contains(dir, b_head));
  const auto fresh_dir = scratch_dir("pool_fresh");
  auto fresh = PromptPool<float>::create(fresh_dir, "demo", bb.config, bb.fingerprint(), 4);
  fresh.add(source(bb, "a", 20));
  fresh.add(source(bb, "c", 22));
  CHECK(read_file(dir / "manifest.json") == read_file(fresh_dir / "manifest.json"));
  const auto after = PromptPool<float>::open(dir);
  for (const auto& ids : {std::vector<std::string>{"a"}, {"c"}, {"a", "c"}, {"c", "a"}})
    CHECK(apt_predict(bb, patches, 5, after, ids).values == apt_predict(bb, patches, 5, fresh, ids).values);

  // Add then forget is the identity on the manifest.
  forget_source(pool, "c");
  CHECK(read_file(dir / "manifest.json") == manifest_before);
  add_source(pool, source(bb, "c", 22));
  forget_source(pool, "c");
  CHECK(read_file(dir / "manifest.json") == manifest_before);

  // Tampering.
  auto bytes = read_file(dir / "a.bin");
  bytes[bytes.size() - 1] ^= 0x01;
  write_file_atomic(dir / "a.bin", bytes);
  CHECK_THROWS_AS(PromptPool<float>::open(dir), FormatError);
  CHECK_THROWS_AS(PromptPool<float>::open(scratch_dir("missing")), PoolError);
  fs::remove_all(dir);
  fs::remove_all(fresh_dir);
}

TEST_CASE("finetuned and head-only ensembles") {
  const auto bb = backbone<double>();
  FinetunedModel<double> m{bb.clone(), source(bb, "h", 3).head, {0, 1, 2, 3}};
  m.backbone.freeze();
  const auto patches = random_patches<double>(bb.config, 4, 5);
  const auto one = ensemble_finetuned<double>({&m}, patches, 4, 4);
  const auto three = ensemble_finetuned<double>({&m, &m, &m}, patches, 4, 4);
  for (std::size_t j = 0; j < one.values.size(); ++j) CHECK(three.values[j] == doctest::Approx(one.values[j]).epsilon(1e-14));
  for (std::size_t i = 0; i < 4; ++i) {
    double total = 0;
    for (double p : three.row(i)) total += p;
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  HeadModel<double> h{m.head, {0, 1, 2, 3}};
  const auto heads = ensemble_heads<double>(bb, {&h, &h}, patches, 4, 4);
  for (std::size_t j = 0; j < one.values.size(); ++j) CHECK(heads.values[j] == doctest::Approx(one.values[j]).epsilon(1e-12));
  CHECK_THROWS_AS(ensemble_finetuned<double>({}, patches, 4, 4), SelectionError);

  const std::vector<int> pred{1, 2, 3, 0}, truth{1, 2, 0, 0};
  CHECK(accuracy(pred, truth) == 0.75);
}
