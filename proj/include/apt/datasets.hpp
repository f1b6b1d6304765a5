// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors
//
// Image sets, the synthetic corpus, CIFAR binary ingestion and the
// partitioning schemes (uniform shards, class episodes, domain episodes).

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace apt {

enum class Split { train, test };

/// Images stored HWC, one contiguous byte buffer.
struct LabeledImageSet {
  int height = 32;
  int width = 32;
  int channels = 3;
  std::size_t class_count = 0;
  Split split = Split::train;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  std::vector<int> domains;  // one per sample; all zero for single-domain sets

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return static_cast<std::size_t>(height * width * channels); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * image_bytes(), image_bytes()};
  }
  /// Throws DataError or LabelError when buffers disagree or labels are out of range.
  void validate() const;
  LabeledImageSet subset(std::span<const std::size_t> members) const;
};

/// Read access to the samples of one data source. Training and prototype
/// construction only ever see a source through this interface.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual std::span<const std::uint8_t> image(std::size_t i) const = 0;
  /// Global class id.
  virtual int label(std::size_t i) const = 0;
  /// Index of sample i in the parent set.
  virtual std::size_t global_index(std::size_t i) const = 0;
};

/// A LabeledImageSet, or the listed members of one.
class SetView : public SampleSource {
 public:
  explicit SetView(const LabeledImageSet& set);
  SetView(const LabeledImageSet& set, std::vector<std::size_t> members);

  std::size_t size() const override { return members_.size(); }
  std::span<const std::uint8_t> image(std::size_t i) const override { return set_->image(members_[i]); }
  int label(std::size_t i) const override { return set_->labels[members_[i]]; }
  std::size_t global_index(std::size_t i) const override { return members_[i]; }

 private:
  const LabeledImageSet* set_;
  std::vector<std::size_t> members_;
};

struct EpisodeSpec {
  enum class Kind { shard, class_episode, domain };
  Kind kind = Kind::shard;
  std::string name;
  std::vector<std::size_t> members;  // ascending indices into the parent set
  std::vector<int> label_map;        // local class -> global class
};

struct SyntheticSpec {
  std::size_t n_classes = 10;
  std::size_t n_domains = 1;
  std::size_t samples_per_class = 60;  // per domain
  int image_size = 32;
  std::uint64_t seed = 0;
  Split split = Split::train;
  /// Pixel noise standard deviation, in [0, 1] intensity units.
  double noise = 0.10;
  /// Maximum displacement of the pattern centre, as a fraction of the image.
  double jitter = 0.12;
  /// Draw every sample's hue at random, leaving the pattern as the only cue.
  bool random_hue = false;
};

/// Class = a geometric pattern (class mod 10) drawn in a class-specific hue
/// with positional, scale and colour jitter. Domain = a global appearance
/// shift (background colour, contrast, noise level, a small global hue rotation).
/// Deterministic in the spec; train and test draws use distinct streams.
LabeledImageSet gen_synthetic(const SyntheticSpec& spec);

enum class CifarVariant { cifar10, cifar100 };

/// Reads CIFAR binary records (label byte(s) then 3072 bytes of R, G, B
/// planes, row-major 32x32). Throws FormatError when the length is not a
/// whole number of records.
LabeledImageSet load_cifar_binary(const std::filesystem::path& path, CifarVariant variant);
LabeledImageSet parse_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant);

/// CIFAR-10 record layout; requires 32x32x3 images and labels < 256.
std::vector<std::uint8_t> encode_cifar10(const LabeledImageSet& set);

/// Seeded permutation sliced into contiguous shards whose sizes differ by at
/// most one (larger shards first). Throws PartitionError when n_shards is
/// zero or exceeds the set size.
std::vector<EpisodeSpec> shard_uniform(const LabeledImageSet& set, std::size_t n_shards, std::uint64_t seed);

/// Contiguous blocks of class_count / n_episodes classes. Throws
/// PartitionError when the classes do not divide evenly.
std::vector<EpisodeSpec> split_class_incremental(const LabeledImageSet& set, std::size_t n_episodes);

struct DomainSplit {
  std::vector<EpisodeSpec> episodes;       // one per training domain
  std::vector<std::size_t> test_members;   // samples of held-out domains
};

/// One episode per domain in `train_domains`, sharing the full label space;
/// every other domain is held out.
DomainSplit split_domains(const LabeledImageSet& set, const std::vector<int>& train_domains);

/// Local label of a global class under a label map; throws LabelError when
/// the class is not covered.
int local_label(std::span<const int> label_map, int global);

std::vector<int> identity_label_map(std::size_t n_classes);

}  // namespace apt
