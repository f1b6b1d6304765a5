// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include "apt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace apt {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// --- AttentionMask ----------------------------------------------------------

void AttentionMask::require_nonempty_rows() const {
  for (std::size_t r = 0; r < rows_; ++r) {
    bool any = false;
    for (std::size_t c = 0; c < cols_ && !any; ++c) any = allowed(r, c);
    if (!any) throw MaskError("attention mask row " + std::to_string(r) + " has no allowed key");
  }
}

std::vector<std::string> AttentionMask::render() const {
  std::vector<std::string> out(rows_, std::string(cols_, '0'));
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c)
      if (allowed(r, c)) out[r][c] = '1';
  return out;
}

// --- Tensor -----------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) : s_(std::make_shared<TensorStorage<T>>()) {
  s_->data.assign(shape_numel(shape), T(0));
  s_->shape = std::move(shape);
  s_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : s_(std::make_shared<TensorStorage<T>>()) {
  if (shape_numel(shape) != values.size())
    throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  s_->shape = std::move(shape);
  s_->data.assign(values.begin(), values.end());
  s_->requires_grad = requires_grad;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return s_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor<T> out;
  out.s_ = std::make_shared<TensorStorage<T>>();
  out.s_->shape = shape();
  out.s_->data = s_->data;
  out.s_->requires_grad = s_->requires_grad;
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

// --- GradTape ---------------------------------------------------------------

template <typename T>
GradTape<T>*& active_tape_slot() {
  thread_local GradTape<T>* slot = nullptr;
  return slot;
}

template GradTape<float>*& active_tape_slot<float>();
template GradTape<double>*& active_tape_slot<double>();

template <typename T>
void GradTape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  auto& st = *loss.storage();
  st.ensure_grad();
  st.grad[0] += T(1);
  // Closures may not record new operations while we unwind.
  NoGradScope<T> quiet;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

template class GradTape<float>;
template class GradTape<double>;

// --- serialization ----------------------------------------------------------

namespace {

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw FormatError("truncated tensor blob");
  return v;
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t, DType as) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(as));
  if (as == dtype_of<T>()) {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(T)));
  } else if (as == DType::f32) {
    for (auto v : t.values()) put<float>(out, static_cast<float>(v));
  } else {
    for (auto v : t.values()) put<double>(out, static_cast<double>(v));
  }
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  const auto rank = get<std::uint32_t>(in);
  if (rank > 8) throw FormatError("tensor blob rank " + std::to_string(rank) + " is implausible");
  Shape shape(rank);
  for (auto& d : shape) d = get<std::uint32_t>(in);
  const auto tag = get<std::uint8_t>(in);
  const std::size_t n = shape_numel(shape);
  std::vector<T> values(n);
  if (tag == static_cast<std::uint8_t>(DType::f32)) {
    for (auto& v : values) v = static_cast<T>(get<float>(in));
  } else if (tag == static_cast<std::uint8_t>(DType::f64)) {
    for (auto& v : values) v = static_cast<T>(get<double>(in));
  } else {
    throw FormatError("unknown tensor dtype tag " + std::to_string(tag));
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
std::string serialize_tensors(std::span<const Tensor<T>> tensors, DType as) {
  std::ostringstream out(std::ios::binary);
  for (const auto& t : tensors) write_tensor(out, t, as);
  return std::move(out).str();
}

template void write_tensor<float>(std::ostream&, const Tensor<float>&, DType);
template void write_tensor<double>(std::ostream&, const Tensor<double>&, DType);
template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);
template std::string serialize_tensors<float>(std::span<const Tensor<float>>, DType);
template std::string serialize_tensors<double>(std::span<const Tensor<double>>, DType);

// --- gradient check ---------------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                           const std::vector<std::pair<std::string, Tensor<double>>>& params,
                           double eps, double floor) {
  std::vector<Tensor<double>> handles;
  for (const auto& [name, p] : params) {
    handles.push_back(p);
    handles.back().zero_grad();
    handles.back().set_requires_grad(true);
  }

  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto loss = f();
    tape.backward(loss);
  }

  GradCheckResult result;
  NoGradScope<double> quiet;
  for (std::size_t pi = 0; pi < handles.size(); ++pi) {
    auto& p = handles[pi];
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double saved = p[i];
      p[i] = saved + eps;
      const double up = f().item();
      p[i] = saved - eps;
      const double down = f().item();
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      const double rel = abs_err / denom;
      ++result.coordinates;
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst = params[pi].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace apt
