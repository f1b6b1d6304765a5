// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors
//
// Dense row-major tensors with a tape-based reverse-mode gradient.
//
// A Tensor is a shared handle: copies alias the same buffer, `clone()` makes
// a deep copy. Operations record a backward closure on the calling thread's
// active GradTape whenever one of their inputs requires a gradient. Shapes
// are explicit; the only broadcasting is the bias add inside `linear` and the
// named row-replication helpers.

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apt/attention_mask.hpp"
#include "apt/errors.hpp"

namespace apt {

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are written in host order and must be little-endian");

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Cache-line aligned buffers keep vectorized reductions independent of
/// where the allocator happens to place a tensor.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorStorage {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }
  /// Length of the last axis (1 for scalars).
  std::size_t cols() const { return s_->shape.empty() ? 1 : s_->shape.back(); }
  /// Product of all leading axes.
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  T* data() { return s_->data.data(); }
  const T* data() const { return s_->data.data(); }
  std::span<T> values() { return s_->data; }
  std::span<const T> values() const { return s_->data; }
  T item() const;
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }
  bool has_grad() const { return s_->grad.size() == s_->data.size() && !s_->data.empty(); }
  std::span<T> grad() { return s_->grad; }
  std::span<const T> grad() const { return s_->grad; }
  void zero_grad() { s_->grad.clear(); }

  Tensor clone() const;
  template <typename U>
  Tensor<U> cast() const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const std::shared_ptr<TensorStorage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> out(numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(s_->data[i]);
  return Tensor<U>(shape(), std::move(out), requires_grad());
}

/// Ordered record of executed operations. `backward` replays the recorded
/// closures in exact reverse order, so every parameter receives the sum of
/// the contributions along all paths.
template <typename T>
class GradTape {
 public:
  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }
  std::size_t size() const noexcept { return ops_.size(); }
  void clear() { ops_.clear(); }

  /// Seeds d(loss)/d(loss) = 1, runs every recorded closure newest-first and
  /// clears the tape.
  void backward(const Tensor<T>& loss);

 private:
  std::vector<std::function<void()>> ops_;
};

template <typename T>
GradTape<T>*& active_tape_slot();

template <typename T>
inline GradTape<T>* active_tape() {
  return active_tape_slot<T>();
}

/// Makes `tape` the calling thread's active tape for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape) : previous_(active_tape_slot<T>()) {
    active_tape_slot<T>() = &tape;
  }
  ~TapeScope() { active_tape_slot<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* previous_;
};

/// Suspends recording on the calling thread.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape_slot<T>()) { active_tape_slot<T>() = nullptr; }
  ~NoGradScope() { active_tape_slot<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape<T>* previous_;
};

// ---------------------------------------------------------------------------
// Operations. Rank-2 operands are [rows x cols] row-major.

/// [m x k] . [k x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x . W^T + bias with x [n x in], W [out x in], bias [out] (may be undefined).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);

/// Normalizes over the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(1e-6));

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// Gathers rows (leading-axis slices) of a rank-2 tensor.
template <typename T>
Tensor<T> select_rows(const Tensor<T>& a, std::span<const std::size_t> rows);

/// Stacks `times` copies of a [r x c] tensor into [times*r x c].
template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& a, std::size_t times);

/// Interleaves per-group row blocks: a [G*Sa x c], b [G*Sb x c] ->
/// [G*(Sa+Sb) x c] with group g laid out as [a_g; b_g].
template <typename T>
Tensor<T> concat_groups(const Tensor<T>& a, const Tensor<T>& b, std::size_t groups);

/// Averages each group of consecutive rows: [G*S x c] -> [G x c].
template <typename T>
Tensor<T> mean_groups(const Tensor<T>& a, std::size_t groups);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, int label);

/// Multi-head scaled dot-product attention over batched row blocks.
///
/// Sample b owns query rows [b*Sq, (b+1)*Sq) of `q` and key/value rows
/// [b*Sk, (b+1)*Sk) of `k`/`v`. `k_shared`/`v_shared` ([M x d], optional) are
/// appended to every sample's key set. The mask, when given, is
/// [Sq x (Sk+M)] and applies to every sample; masked keys get zero weight,
/// which is what an additive -1e9 bias produces after exponentiation.
template <typename T>
struct AttentionArgs {
  Tensor<T> q;
  Tensor<T> k;
  Tensor<T> v;
  Tensor<T> k_shared;
  Tensor<T> v_shared;
  std::size_t batch = 1;
  std::size_t heads = 1;
  const AttentionMask* mask = nullptr;
};

template <typename T>
Tensor<T> attention(const AttentionArgs<T>& args);

// ---------------------------------------------------------------------------
// Serialization: rank (u32), dims (u32 each), dtype tag (u8), raw scalars.

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t, DType as = dtype_of<T>());

/// Reads one tensor, converting the stored dtype to T.
template <typename T>
Tensor<T> read_tensor(std::istream& in);

/// Canonical blob bytes of a tensor list (used for content fingerprints).
template <typename T>
std::string serialize_tensors(std::span<const Tensor<T>> tensors, DType as = DType::f32);

// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<param>[<index>]" of the worst coordinate
};

/// Compares tape gradients of the scalar `f` against central differences
/// (f(x+eps) - f(x-eps)) / 2eps for every coordinate of every parameter.
/// Relative error is |a - n| / max(|a|, |n|, floor); two zero gradients give 0.
GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                           const std::vector<std::pair<std::string, Tensor<double>>>& params,
                           double eps = 1e-5, double floor = 1e-6);

}  // namespace apt
