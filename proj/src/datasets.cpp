// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include "apt/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "apt/errors.hpp"
#include "apt/io.hpp"
#include "apt/random.hpp"

namespace apt {

void LabeledImageSet::validate() const {
  if (height <= 0 || width <= 0 || channels <= 0) throw DataError("image dimensions must be positive");
  if (pixels.size() != labels.size() * image_bytes())
    throw DataError("pixel buffer holds " + std::to_string(pixels.size()) + " bytes for " +
                    std::to_string(labels.size()) + " images of " + std::to_string(image_bytes()) + " bytes");
  if (!domains.empty() && domains.size() != labels.size())
    throw DataError("domain tags do not match the number of samples");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count)
      throw LabelError("sample " + std::to_string(i) + " has label " + std::to_string(labels[i]) +
                       " outside [0, " + std::to_string(class_count) + ")");
}

LabeledImageSet LabeledImageSet::subset(std::span<const std::size_t> members) const {
  LabeledImageSet out;
  out.height = height;
  out.width = width;
  out.channels = channels;
  out.class_count = class_count;
  out.split = split;
  out.pixels.reserve(members.size() * image_bytes());
  for (auto m : members) {
    const auto img = image(m);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(labels[m]);
    if (!domains.empty()) out.domains.push_back(domains[m]);
  }
  return out;
}

SetView::SetView(const LabeledImageSet& set) : set_(&set), members_(set.size()) {
  std::iota(members_.begin(), members_.end(), std::size_t{0});
}

SetView::SetView(const LabeledImageSet& set, std::vector<std::size_t> members)
    : set_(&set), members_(std::move(members)) {
  for (auto m : members_)
    if (m >= set.size()) throw DataError("view member " + std::to_string(m) + " is out of range");
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

using Rgb = std::array<double, 3>;

Rgb hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Coverage of pattern `shape` at (u, v) in the pattern's unit frame.
bool inside(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v), r2 = u * u + v * v;
  switch (shape) {
    case 0: return r2 < 0.8;                                           // disk
    case 1: return au < 0.75 && av < 0.75;                             // square
    case 2: return v > -0.8 && v < 0.8 && au < (v + 0.8) * 0.55;       // triangle
    case 3: return (au < 0.28 && av < 0.9) || (av < 0.28 && au < 0.9); // plus
    case 4: return r2 > 0.3 && r2 < 0.85;                              // ring
    case 5: return au < 0.85 && av < 0.85 && std::fmod(v + 2.0, 0.56) < 0.28;  // horizontal bars
    case 6: return au < 0.85 && av < 0.85 && std::fmod(u + 2.0, 0.56) < 0.28;  // vertical bars
    case 7: return au + av < 0.95;                                     // diamond
    case 8: return std::abs(au - av) < 0.22 && au < 0.85;              // X
    default: {                                                         // checker
      if (au >= 0.85 || av >= 0.85) return false;
      const int cu = static_cast<int>(std::floor((u + 0.85) / 0.425));
      const int cv = static_cast<int>(std::floor((v + 0.85) / 0.425));
      return (cu + cv) % 2 == 0;
    }
  }
}

struct DomainStyle {
  Rgb background;
  double contrast;
  double noise;
  double hue_shift;
};

// Global hue shifts stay below half the spacing between class hues.
DomainStyle domain_style(std::size_t d, double base_noise) {
  if (d == 0) return {{0.18, 0.18, 0.18}, 1.0, base_noise, 0.0};
  static constexpr std::array<double, 5> shifts{0.0, 0.02, -0.02, 0.035, -0.035};
  DomainStyle s;
  s.background = hsv(0.37 * static_cast<double>(d), 0.5, 0.15 + 0.08 * static_cast<double>(d % 5));
  s.contrast = 1.0 - 0.07 * static_cast<double>(d % 4);
  s.noise = base_noise * (1.0 + 0.25 * static_cast<double>(d % 3));
  s.hue_shift = shifts[d % shifts.size()];
  return s;
}

void render(std::uint8_t* out, int size, int cls, const DomainStyle& style, double jitter, bool random_hue,
            Rng& rng) {
  const double cx = 0.5 + rng.uniform(-jitter, jitter), cy = 0.5 + rng.uniform(-jitter, jitter);
  const double scale = 0.30 * rng.uniform(0.8, 1.15);
  const double hue = random_hue ? rng.uniform()
                                : std::fmod(0.1 * static_cast<double>(cls % 10) + 0.031 * static_cast<double>(cls / 10), 1.0);
  const Rgb fg =
      hsv(hue + style.hue_shift + 1.0 + rng.uniform(-0.03, 0.03), rng.uniform(0.6, 0.9), rng.uniform(0.7, 0.95));
  const int shape = cls % 10;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double u = ((x + 0.5) / size - cx) / scale, v = ((y + 0.5) / size - cy) / scale;
      const bool on = inside(shape, u, v);
      std::uint8_t* px = out + (static_cast<std::size_t>(y) * size + x) * 3;
      for (int c = 0; c < 3; ++c) {
        const double base = on ? style.background[c] + style.contrast * (fg[c] - style.background[c])
                               : style.background[c];
        const double val = base + style.noise * rng.normal();
        px[c] = static_cast<std::uint8_t>(std::clamp(std::lround(val * 255.0), 0l, 255l));
      }
    }
}

}  // namespace

LabeledImageSet gen_synthetic(const SyntheticSpec& spec) {
  if (spec.n_classes == 0 || spec.n_domains == 0 || spec.samples_per_class == 0 || spec.image_size <= 0)
    throw ConfigError("synthetic corpus sizes must be positive");
  LabeledImageSet set;
  set.height = set.width = spec.image_size;
  set.channels = 3;
  set.class_count = spec.n_classes;
  set.split = spec.split;
  const std::size_t n = spec.n_classes * spec.n_domains * spec.samples_per_class;
  set.pixels.resize(n * set.image_bytes());
  Rng rng(derive_seed(spec.seed, spec.split == Split::train ? 0 : 1));
  std::size_t i = 0;
  for (std::size_t d = 0; d < spec.n_domains; ++d) {
    const auto style = domain_style(d, spec.noise);
    for (std::size_t k = 0; k < spec.samples_per_class; ++k)
      for (std::size_t c = 0; c < spec.n_classes; ++c, ++i) {
        render(set.pixels.data() + i * set.image_bytes(), spec.image_size, static_cast<int>(c), style,
               spec.jitter, spec.random_hue, rng);
        set.labels.push_back(static_cast<int>(c));
        set.domains.push_back(static_cast<int>(d));
      }
  }
  return set;
}

// ---------------------------------------------------------------------------
// CIFAR binary

LabeledImageSet parse_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant) {
  const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t plane = 32 * 32, record = label_bytes + 3 * plane;
  if (bytes.size() % record != 0)
    throw FormatError("CIFAR file of " + std::to_string(bytes.size()) + " bytes has a partial record at byte offset " +
                      std::to_string(bytes.size() - bytes.size() % record));
  LabeledImageSet set;
  set.class_count = variant == CifarVariant::cifar10 ? 10 : 100;
  const std::size_t n = bytes.size() / record;
  set.pixels.resize(n * 3 * plane);
  set.labels.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * record;
    const int label = rec[label_bytes - 1];
    if (static_cast<std::size_t>(label) >= set.class_count)
      throw FormatError("record " + std::to_string(r) + " at byte offset " + std::to_string(r * record) +
                        " has label " + std::to_string(label));
    set.labels.push_back(label);
    const std::uint8_t* planes = rec + label_bytes;
    std::uint8_t* out = set.pixels.data() + r * 3 * plane;
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) out[p * 3 + c] = planes[c * plane + p];
  }
  set.domains.assign(n, 0);
  return set;
}

LabeledImageSet load_cifar_binary(const std::filesystem::path& path, CifarVariant variant) {
  const auto bytes = read_file(path);
  return parse_cifar_binary({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()}, variant);
}

std::vector<std::uint8_t> encode_cifar10(const LabeledImageSet& set) {
  if (set.height != 32 || set.width != 32 || set.channels != 3)
    throw FormatError("CIFAR layout requires 32x32x3 images");
  const std::size_t plane = 32 * 32;
  std::vector<std::uint8_t> out;
  out.reserve(set.size() * (1 + 3 * plane));
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.labels[i] < 0 || set.labels[i] > 255) throw FormatError("label does not fit a CIFAR label byte");
    out.push_back(static_cast<std::uint8_t>(set.labels[i]));
    const auto img = set.image(i);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) out.push_back(img[p * 3 + c]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partitions

std::vector<int> identity_label_map(std::size_t n_classes) {
  std::vector<int> m(n_classes);
  std::iota(m.begin(), m.end(), 0);
  return m;
}

int local_label(std::span<const int> label_map, int global) {
  for (std::size_t i = 0; i < label_map.size(); ++i)
    if (label_map[i] == global) return static_cast<int>(i);
  throw LabelError("class " + std::to_string(global) + " is not in the source's label map");
}

std::vector<EpisodeSpec> shard_uniform(const LabeledImageSet& set, std::size_t n_shards, std::uint64_t seed) {
  const std::size_t n = set.size();
  if (n_shards == 0 || n_shards > n)
    throw PartitionError("cannot split " + std::to_string(n) + " samples into " + std::to_string(n_shards) + " shards");
  const auto perm = Rng(seed).permutation(n);
  std::vector<EpisodeSpec> shards(n_shards);
  std::size_t at = 0;
  for (std::size_t s = 0; s < n_shards; ++s) {
    const std::size_t len = n / n_shards + (s < n % n_shards ? 1 : 0);
    auto& e = shards[s];
    e.kind = EpisodeSpec::Kind::shard;
    e.name = "shard-" + std::to_string(s);
    e.members.assign(perm.begin() + static_cast<std::ptrdiff_t>(at), perm.begin() + static_cast<std::ptrdiff_t>(at + len));
    std::sort(e.members.begin(), e.members.end());
    e.label_map = identity_label_map(set.class_count);
    at += len;
  }
  return shards;
}

std::vector<EpisodeSpec> split_class_incremental(const LabeledImageSet& set, std::size_t n_episodes) {
  if (n_episodes == 0 || set.class_count % n_episodes != 0)
    throw PartitionError(std::to_string(set.class_count) + " classes do not split into " +
                         std::to_string(n_episodes) + " equal episodes");
  const std::size_t per = set.class_count / n_episodes;
  std::vector<EpisodeSpec> eps(n_episodes);
  for (std::size_t e = 0; e < n_episodes; ++e) {
    eps[e].kind = EpisodeSpec::Kind::class_episode;
    eps[e].name = "episode-" + std::to_string(e);
    for (std::size_t c = 0; c < per; ++c) eps[e].label_map.push_back(static_cast<int>(e * per + c));
  }
  for (std::size_t i = 0; i < set.size(); ++i)
    eps[static_cast<std::size_t>(set.labels[i]) / per].members.push_back(i);
  return eps;
}

DomainSplit split_domains(const LabeledImageSet& set, const std::vector<int>& train_domains) {
  if (set.domains.size() != set.size()) throw DataError("set carries no domain tags");
  DomainSplit out;
  for (int d : train_domains) {
    EpisodeSpec e;
    e.kind = EpisodeSpec::Kind::domain;
    e.name = "domain-" + std::to_string(d);
    e.label_map = identity_label_map(set.class_count);
    out.episodes.push_back(std::move(e));
  }
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto it = std::find(train_domains.begin(), train_domains.end(), set.domains[i]);
    if (it == train_domains.end()) out.test_members.push_back(i);
    else out.episodes[static_cast<std::size_t>(it - train_domains.begin())].members.push_back(i);
  }
  return out;
}

}  // namespace apt
