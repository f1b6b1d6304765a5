// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The APT Authors

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "apt/tensor.hpp"

namespace apt {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using RowVecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

template <typename T>
bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!active_tape<T>()) return false;
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
void record(std::function<void()> fn) {
  active_tape<T>()->record(std::move(fn));
}

template <typename T>
bool needs(const std::shared_ptr<TensorStorage<T>>& s) {
  return s && s->requires_grad;
}

void require_rank2(const Shape& s, const char* op, const char* what) {
  if (s.size() != 2)
    throw DimensionError(std::string(op) + ": " + what + " must be rank 2, got " + shape_str(s));
}

template <typename T>
void require_finite(const Tensor<T>& x, const char* op) {
  for (auto v : x.values())
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
}

}  // namespace

// --- matmul / linear --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul", "lhs");
  require_rank2(b.shape(), "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  const bool rec = wants_grad<T>({&a, &b});
  Tensor<T> out(Shape{m, n}, rec);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data(), m, k) * ConstMatMap<T>(b.data(), k, n);
  if (rec) {
    record<T>([as = a.storage(), bs = b.storage(), os = out.storage(), m, k, n] {
      if (os->grad.empty()) return;
      ConstMatMap<T> dc(os->grad.data(), m, n);
      if (needs(as)) {
        as->ensure_grad();
        MatMap<T>(as->grad.data(), m, k).noalias() +=
            dc * ConstMatMap<T>(bs->data.data(), k, n).transpose();
      }
      if (needs(bs)) {
        bs->ensure_grad();
        MatMap<T>(bs->grad.data(), k, n).noalias() +=
            ConstMatMap<T>(as->data.data(), m, k).transpose() * dc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank2(weight.shape(), "linear", "weight");
  const std::size_t out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.cols() != in_f)
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  if (bias.defined() && bias.numel() != out_f)
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  const std::size_t n = x.rows();
  const bool rec = wants_grad<T>({&x, &weight, &bias});
  Tensor<T> out(Shape{n, out_f}, rec);
  MatMap<T> y(out.data(), n, out_f);
  y.noalias() = ConstMatMap<T>(x.data(), n, in_f) * ConstMatMap<T>(weight.data(), out_f, in_f).transpose();
  if (bias.defined()) y.rowwise() += ConstMatMap<T>(bias.data(), 1, out_f).row(0);
  if (rec) {
    record<T>([xs = x.storage(), ws = weight.storage(), bs = bias.storage(), os = out.storage(), n,
               in_f, out_f] {
      if (os->grad.empty()) return;
      ConstMatMap<T> dy(os->grad.data(), n, out_f);
      if (needs(xs)) {
        xs->ensure_grad();
        MatMap<T>(xs->grad.data(), n, in_f).noalias() +=
            dy * ConstMatMap<T>(ws->data.data(), out_f, in_f);
      }
      if (needs(ws)) {
        ws->ensure_grad();
        MatMap<T>(ws->grad.data(), out_f, in_f).noalias() +=
            dy.transpose() * ConstMatMap<T>(xs->data.data(), n, in_f);
      }
      if (needs(bs)) {
        bs->ensure_grad();
        RowVecMap<T>(bs->grad.data(), out_f) += dy.colwise().sum();
      }
    });
  }
  return out;
}

// --- elementwise ------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const bool rec = wants_grad<T>({&a, &b});
  Tensor<T> out(a.shape(), rec);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  if (rec) {
    record<T>([as = a.storage(), bs = b.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      for (auto* s : {as.get(), bs.get()}) {
        if (!s->requires_grad) continue;
        s->ensure_grad();
        for (std::size_t i = 0; i < os->grad.size(); ++i) s->grad[i] += os->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const bool rec = wants_grad<T>({&a, &b});
  Tensor<T> out(a.shape(), rec);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  if (rec) {
    record<T>([as = a.storage(), bs = b.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      const auto& g = os->grad;
      if (as->requires_grad) {
        as->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) as->grad[i] += g[i] * bs->data[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bs->grad[i] += g[i] * as->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const bool rec = wants_grad<T>({&a});
  Tensor<T> out(a.shape(), rec);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * factor;
  if (rec) {
    record<T>([as = a.storage(), os = out.storage(), factor] {
      if (os->grad.empty()) return;
      as->ensure_grad();
      for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const bool rec = wants_grad<T>({&a});
  Tensor<T> out(a.shape(), rec);
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = T(0.5) * a[i] * (T(1) + std::erf(a[i] * inv_sqrt2));
  if (rec) {
    record<T>([as = a.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      constexpr T inv_sqrt2pi = T(0.39894228040143267794);
      as->ensure_grad();
      for (std::size_t i = 0; i < os->grad.size(); ++i) {
        const T x = as->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        as->grad[i] += os->grad[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

// --- normalization ----------------------------------------------------------

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.cols();
  if (d < 1) throw DimensionError("layernorm: empty last axis");
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layernorm: affine " + shape_str(gamma.shape()) + " does not match " +
                         shape_str(x.shape()));
  const std::size_t n = x.rows();
  const bool rec = wants_grad<T>({&x, &gamma, &beta});
  Tensor<T> out(x.shape(), rec);
  std::vector<T> xhat(rec ? x.numel() : 0);
  std::vector<T> rstd(rec ? n : 0);
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    T* yr = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mean) * rs;
      yr[j] = h * gamma[j] + beta[j];
      if (rec) xhat[r * d + j] = h;
    }
    if (rec) rstd[r] = rs;
  }
  if (rec) {
    record<T>([xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage(),
               xhat = std::move(xhat), rstd = std::move(rstd), n, d] {
      if (os->grad.empty()) return;
      const auto& dy = os->grad;
      if (needs(gs)) {
        gs->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) gs->grad[j] += dy[r * d + j] * xhat[r * d + j];
      }
      if (needs(bs)) {
        bs->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) bs->grad[j] += dy[r * d + j];
      }
      if (needs(xs)) {
        xs->ensure_grad();
        for (std::size_t r = 0; r < n; ++r) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = dy[r * d + j] * gs->data[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[r * d + j];
          }
          mean_dh /= T(d);
          mean_dh_h /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = dy[r * d + j] * gs->data[j];
            xs->grad[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= std::max<std::size_t>(x.rank(), 1))
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  require_finite(x, "softmax");
  const auto& s = x.shape();
  const std::size_t len = s.empty() ? 1 : s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const bool rec = wants_grad<T>({&x});
  Tensor<T> out(x.shape(), rec);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  if (rec) {
    record<T>([xs = x.storage(), os = out.storage(), outer, inner, len] {
      if (os->grad.empty()) return;
      xs->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < len; ++j)
            dot += os->data[base + j * inner] * os->grad[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t at = base + j * inner;
            xs->grad[at] += os->data[at] * (os->grad[at] - dot);
          }
        }
      }
    });
  }
  return out;
}

// --- shape plumbing ---------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  const bool rec = wants_grad<T>({&a});
  Tensor<T> out(std::move(shape), std::vector<T>(a.values().begin(), a.values().end()), rec);
  if (rec) {
    record<T>([as = a.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      as->ensure_grad();
      for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += os->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool compatible = s.size() == ref.size();
    for (std::size_t i = 0; compatible && i < s.size(); ++i)
      if (i != axis && s[i] != ref[i]) compatible = false;
    if (!compatible)
      throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(ref) +
                           " along axis " + std::to_string(axis));
    shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];

  bool rec = false;
  for (const auto& p : parts) rec = rec || wants_grad<T>({&p});
  Tensor<T> out(shape, rec);
  const std::size_t out_chunk = shape[axis] * inner;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data() + o * chunk, chunk, out.data() + o * out_chunk + offset);
    offsets.push_back(offset);
    offset += chunk;
  }
  if (rec) {
    std::vector<std::shared_ptr<TensorStorage<T>>> stores;
    std::vector<std::size_t> chunks;
    for (const auto& p : parts) {
      stores.push_back(p.storage());
      chunks.push_back(p.dim(axis) * inner);
    }
    record<T>([stores, chunks, offsets, os = out.storage(), outer, out_chunk] {
      if (os->grad.empty()) return;
      for (std::size_t k = 0; k < stores.size(); ++k) {
        auto& s = *stores[k];
        if (!s.requires_grad) continue;
        s.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < chunks[k]; ++i)
            s.grad[o * chunks[k] + i] += os->grad[o * out_chunk + offsets[k] + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> select_rows(const Tensor<T>& a, std::span<const std::size_t> rows) {
  const std::size_t c = a.cols(), n = a.rows();
  for (auto r : rows)
    if (r >= n)
      throw DimensionError("select_rows: row " + std::to_string(r) + " out of range for " +
                           shape_str(a.shape()));
  const bool rec = wants_grad<T>({&a});
  Tensor<T> out(Shape{rows.size(), c}, rec);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(a.data() + rows[i] * c, c, out.data() + i * c);
  if (rec) {
    record<T>([as = a.storage(), os = out.storage(),
               idx = std::vector<std::size_t>(rows.begin(), rows.end()), c] {
      if (os->grad.empty()) return;
      as->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) as->grad[idx[i] * c + j] += os->grad[i * c + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& a, std::size_t times) {
  const std::size_t block = a.numel();
  const bool rec = wants_grad<T>({&a});
  Tensor<T> out(Shape{times * a.rows(), a.cols()}, rec);
  for (std::size_t t = 0; t < times; ++t) std::copy_n(a.data(), block, out.data() + t * block);
  if (rec) {
    record<T>([as = a.storage(), os = out.storage(), times, block] {
      if (os->grad.empty()) return;
      as->ensure_grad();
      for (std::size_t t = 0; t < times; ++t)
        for (std::size_t i = 0; i < block; ++i) as->grad[i] += os->grad[t * block + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_groups(const Tensor<T>& a, const Tensor<T>& b, std::size_t groups) {
  const std::size_t c = a.cols();
  if (b.cols() != c || groups == 0 || a.rows() % groups || b.rows() % groups)
    throw DimensionError("concat_groups: " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not split into " + std::to_string(groups) +
                         " groups");
  const std::size_t ca = a.rows() / groups * c, cb = b.rows() / groups * c;
  const bool rec = wants_grad<T>({&a, &b});
  Tensor<T> out(Shape{a.rows() + b.rows(), c}, rec);
  for (std::size_t g = 0; g < groups; ++g) {
    std::copy_n(a.data() + g * ca, ca, out.data() + g * (ca + cb));
    std::copy_n(b.data() + g * cb, cb, out.data() + g * (ca + cb) + ca);
  }
  if (rec) {
    record<T>([as = a.storage(), bs = b.storage(), os = out.storage(), groups, ca, cb] {
      if (os->grad.empty()) return;
      for (std::size_t g = 0; g < groups; ++g) {
        const T* src = os->grad.data() + g * (ca + cb);
        if (as->requires_grad) {
          as->ensure_grad();
          for (std::size_t i = 0; i < ca; ++i) as->grad[g * ca + i] += src[i];
        }
        if (bs->requires_grad) {
          bs->ensure_grad();
          for (std::size_t i = 0; i < cb; ++i) bs->grad[g * cb + i] += src[ca + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_groups(const Tensor<T>& a, std::size_t groups) {
  const std::size_t c = a.cols();
  if (groups == 0 || a.rows() % groups)
    throw DimensionError("mean_groups: " + shape_str(a.shape()) + " does not split into " +
                         std::to_string(groups) + " groups");
  const std::size_t per = a.rows() / groups;
  const bool rec = wants_grad<T>({&a});
  Tensor<T> out(Shape{groups, c}, rec);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t r = 0; r < per; ++r)
      for (std::size_t j = 0; j < c; ++j) out[g * c + j] += a[(g * per + r) * c + j] / T(per);
  if (rec) {
    record<T>([as = a.storage(), os = out.storage(), groups, per, c] {
      if (os->grad.empty()) return;
      as->ensure_grad();
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t r = 0; r < per; ++r)
          for (std::size_t j = 0; j < c; ++j)
            as->grad[(g * per + r) * c + j] += os->grad[g * c + j] / T(per);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const bool rec = wants_grad<T>({&a});
  T total = 0;
  for (auto v : a.values()) total += v;
  auto out = Tensor<T>::scalar(total, rec);
  if (rec) {
    record<T>([as = a.storage(), os = out.storage()] {
      if (os->grad.empty()) return;
      as->ensure_grad();
      for (auto& g : as->grad) g += os->grad[0];
    });
  }
  return out;
}

// --- loss -------------------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t c = logits.cols(), b = logits.rows();
  if (labels.size() != b)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  for (auto y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw LabelError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(c) + ")");
  require_finite(logits, "cross_entropy");
  const bool rec = wants_grad<T>({&logits});
  std::vector<T> probs(b * c);
  T loss = 0;
  for (std::size_t r = 0; r < b; ++r) {
    const T* x = logits.data() + r * c;
    const T mx = *std::max_element(x, x + c);
    T total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(x[j] - mx);
    const T log_z = mx + std::log(total);
    loss += log_z - x[labels[r]];
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(x[j] - log_z);
  }
  auto out = Tensor<T>::scalar(loss / T(b), rec);
  if (rec) {
    record<T>([ls = logits.storage(), os = out.storage(), probs = std::move(probs),
               ys = std::vector<int>(labels.begin(), labels.end()), b, c] {
      if (os->grad.empty()) return;
      ls->ensure_grad();
      const T g = os->grad[0] / T(b);
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          const T onehot = static_cast<std::size_t>(ys[r]) == j ? T(1) : T(0);
          ls->grad[r * c + j] += g * (probs[r * c + j] - onehot);
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, int label) {
  const int labels[1] = {label};
  return cross_entropy(logits.rank() == 1 ? reshape(logits, Shape{1, logits.numel()}) : logits,
                       std::span<const int>(labels));
}

// --- attention --------------------------------------------------------------

template <typename T>
Tensor<T> attention(const AttentionArgs<T>& args) {
  const auto& q = args.q;
  const auto& k = args.k;
  const auto& v = args.v;
  const std::size_t d = q.cols(), B = args.batch, H = args.heads;
  if (B == 0 || H == 0 || d % H)
    throw DimensionError("attention: width " + std::to_string(d) + " does not split into " +
                         std::to_string(H) + " heads");
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows() || q.rows() % B || k.rows() % B)
    throw DimensionError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  const bool shared = args.k_shared.defined() && args.k_shared.numel() > 0;
  const std::size_t M = shared ? args.k_shared.rows() : 0;
  if (shared && (args.k_shared.cols() != d || !args.v_shared.defined() ||
                 args.v_shared.rows() != M || args.v_shared.cols() != d))
    throw DimensionError("attention: shared keys " + shape_str(args.k_shared.shape()) +
                         " do not match width " + std::to_string(d));
  const std::size_t Sq = q.rows() / B, Sk = k.rows() / B, S = Sk + M;
  if (args.mask) {
    if (args.mask->rows() != Sq || args.mask->cols() != S)
      throw MaskError("attention mask is " + std::to_string(args.mask->rows()) + "x" +
                      std::to_string(args.mask->cols()) + ", expected " + std::to_string(Sq) +
                      "x" + std::to_string(S));
    args.mask->require_nonempty_rows();
  }
  const std::size_t hd = d / H;
  const T scale_f = T(1) / std::sqrt(T(hd));
  const AttentionMask* mask = args.mask;

  const bool rec = wants_grad<T>({&q, &k, &v, &args.k_shared, &args.v_shared});
  Tensor<T> out(Shape{q.rows(), d}, rec);
  std::vector<T> probs(B * H * Sq * S, T(0));

  const T* kd = k.data();
  const T* vd = v.data();
  const T* ksd = shared ? args.k_shared.data() : nullptr;
  const T* vsd = shared ? args.v_shared.data() : nullptr;
  auto key_row = [&](std::size_t b, std::size_t j) {
    return j < Sk ? kd + (b * Sk + j) * d : ksd + (j - Sk) * d;
  };
  auto val_row = [&](std::size_t b, std::size_t j) {
    return j < Sk ? vd + (b * Sk + j) * d : vsd + (j - Sk) * d;
  };

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < Sq; ++i) {
        const T* qi = q.data() + (b * Sq + i) * d + off;
        T* p = probs.data() + ((b * H + h) * Sq + i) * S;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < S; ++j) {
          if (mask && !mask->allowed(i, j)) continue;
          const T* kj = key_row(b, j) + off;
          T s = 0;
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          p[j] = s * scale_f;
          mx = std::max(mx, p[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < S; ++j) {
          if (mask && !mask->allowed(i, j)) continue;
          p[j] = std::exp(p[j] - mx);
          total += p[j];
        }
        T* oi = out.data() + (b * Sq + i) * d + off;
        for (std::size_t j = 0; j < S; ++j) {
          if (mask && !mask->allowed(i, j)) continue;
          p[j] /= total;
          const T* vj = val_row(b, j) + off;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }

  if (rec) {
    std::optional<AttentionMask> mask_copy;
    if (mask) mask_copy = *mask;
    record<T>([qs = q.storage(), ks = k.storage(), vs = v.storage(),
               kss = shared ? args.k_shared.storage() : nullptr,
               vss = shared ? args.v_shared.storage() : nullptr, os = out.storage(),
               probs = std::move(probs), mask_copy = std::move(mask_copy), B, H, Sq, Sk, S, d, hd,
               scale_f] {
      if (os->grad.empty()) return;
      for (auto* s : {qs.get(), ks.get(), vs.get(), kss.get(), vss.get()})
        if (s && s->requires_grad) s->ensure_grad();
      auto grad_of = [](const std::shared_ptr<TensorStorage<T>>& s) -> T* {
        return s && s->requires_grad ? s->grad.data() : nullptr;
      };
      T* dq = grad_of(qs);
      T* dk = grad_of(ks);
      T* dv = grad_of(vs);
      T* dks = grad_of(kss);
      T* dvs = grad_of(vss);
      const AttentionMask* m = mask_copy ? &*mask_copy : nullptr;
      std::vector<T> dp(S);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t off = h * hd;
          for (std::size_t i = 0; i < Sq; ++i) {
            const T* p = probs.data() + ((b * H + h) * Sq + i) * S;
            const T* go = os->grad.data() + (b * Sq + i) * d + off;
            const T* qi = qs->data.data() + (b * Sq + i) * d + off;
            T weighted = 0;
            for (std::size_t j = 0; j < S; ++j) {
              dp[j] = 0;
              if (m && !m->allowed(i, j)) continue;
              const T* vj = j < Sk ? vs->data.data() + (b * Sk + j) * d + off
                                   : vss->data.data() + (j - Sk) * d + off;
              T acc = 0;
              for (std::size_t c = 0; c < hd; ++c) acc += go[c] * vj[c];
              dp[j] = acc;
              weighted += p[j] * acc;
              T* dvj = j < Sk ? (dv ? dv + (b * Sk + j) * d + off : nullptr)
                              : (dvs ? dvs + (j - Sk) * d + off : nullptr);
              if (dvj)
                for (std::size_t c = 0; c < hd; ++c) dvj[c] += p[j] * go[c];
            }
            for (std::size_t j = 0; j < S; ++j) {
              if (m && !m->allowed(i, j)) continue;
              const T ds = p[j] * (dp[j] - weighted) * scale_f;
              if (ds == T(0)) continue;
              const T* kj = j < Sk ? ks->data.data() + (b * Sk + j) * d + off
                                   : kss->data.data() + (j - Sk) * d + off;
              if (dq) {
                T* dqi = dq + (b * Sq + i) * d + off;
                for (std::size_t c = 0; c < hd; ++c) dqi[c] += ds * kj[c];
              }
              T* dkj = j < Sk ? (dk ? dk + (b * Sk + j) * d + off : nullptr)
                              : (dks ? dks + (j - Sk) * d + off : nullptr);
              if (dkj)
                for (std::size_t c = 0; c < hd; ++c) dkj[c] += ds * qi[c];
            }
          }
        }
      }
    });
  }
  return out;
}

// --- explicit instantiations -------------------------------------------------

#define APT_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                  \
  template Tensor<T> layernorm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                        \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                      \
  template Tensor<T> select_rows<T>(const Tensor<T>&, std::span<const std::size_t>);             \
  template Tensor<T> repeat_rows<T>(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> concat_groups<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);          \
  template Tensor<T> mean_groups<T>(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                   \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>);                   \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, int);                                    \
  template Tensor<T> attention<T>(const AttentionArgs<T>&);

APT_INSTANTIATE_OPS(float)
APT_INSTANTIATE_OPS(double)

#undef APT_INSTANTIATE_OPS

}  // namespace apt
