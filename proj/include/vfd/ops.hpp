#pragma once

// Differentiable tensor operations. Each op computes its forward value
// eagerly and records a backward rule on the inputs' tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "vfd/autograd.hpp"
#include "vfd/detail/gemm.hpp"
#include "vfd/tensor.hpp"

namespace vfd {

namespace detail {

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw ShapeMismatch("operands live on different tapes");
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeMismatch(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// Supports [M,K]x[K,N], batched [B,M,K]x[B,K,N], and [B,M,K]x[K,N] (shared
// right operand, as in a linear layer).
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool ok_rank = (sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3) ||
                       (sa.size() == 3 && sb.size() == 2);
  detail::require(ok_rank, "matmul: unsupported ranks " + to_string(sa) + " x " + to_string(sb));
  const std::size_t k = sa.back();
  const std::size_t kb = sb[sb.size() - 2];
  detail::require(k == kb, "matmul: inner dims differ " + to_string(sa) + " x " + to_string(sb));
  const std::size_t n = sb.back();

  if (sb.size() == 2) {
    // Flatten leading dims of a.
    const std::size_t rows = a.value().numel() / k;
    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);
    Tensor<T> out(out_shape);
    detail::gemm(false, false, rows, n, k, a.value().ptr(), b.value().ptr(), out.ptr(), false);
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib, rows, n, k](Tape<T>& tp, std::size_t self) {
      auto g = tp.grad_in(self);
      if (auto da = tp.grad_out(ia); !da.empty())
        detail::gemm(false, true, rows, k, n, g.data(), tp.value(ib).ptr(), da.data(), true);
      if (auto db = tp.grad_out(ib); !db.empty())
        detail::gemm(true, false, k, n, rows, tp.value(ia).ptr(), g.data(), db.data(), true);
    });
  }

  detail::require(sa[0] == sb[0], "matmul: batch dims differ " + to_string(sa) + " x " + to_string(sb));
  const std::size_t batch = sa[0], m = sa[1];
  Tensor<T> out(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(false, false, m, n, k, a.value().ptr() + i * m * k, b.value().ptr() + i * k * n,
                 out.ptr() + i * m * n, false);
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, batch, m, n, k](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto da = tp.grad_out(ia);
    auto db = tp.grad_out(ib);
    const T* av = tp.value(ia).ptr();
    const T* bv = tp.value(ib).ptr();
    for (std::size_t i = 0; i < batch; ++i) {
      const T* gi = g.data() + i * m * n;
      if (!da.empty()) detail::gemm(false, true, m, k, n, gi, bv + i * k * n, da.data() + i * m * k, true);
      if (!db.empty()) detail::gemm(true, false, k, n, m, av + i * m * k, gi, db.data() + i * k * n, true);
    }
  });
}

// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename T>
Var<T> transpose(const Var<T>& a) {
  const Shape& s = a.shape();
  detail::require(s.size() == 2 || s.size() == 3, "transpose: rank must be 2 or 3");
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t r = s[s.size() - 2], c = s.back();
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor<T> out(os);
  const T* src = a.value().ptr();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = src[b * r * c + i * c + j];
  const auto ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, batch, r, c](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto da = tp.grad_out(ia);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) da[b * r * c + i * c + j] += g[b * r * c + j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

// Softmax over the last axis, stabilised by subtracting the row maximum. A
// length-1 row evaluates to exactly 1.
template <typename T>
Var<T> softmax(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) throw EmptyAxis("softmax: no last axis to normalise over");
  const std::size_t len = s.back();
  const std::size_t rows = x.value().numel() / len;
  Tensor<T> out(s);
  const T* in = x.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = in + r * len;
    T* yi = out.ptr() + r * len;
    const T mx = *std::max_element(xi, xi + len);
    T sum{0};
    for (std::size_t j = 0; j < len; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    for (std::size_t j = 0; j < len; ++j) yi[j] /= sum;
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, rows, len](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto dx = tp.grad_out(ix);
    const T* yv = tp.value(self).ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < len; ++j) dot += g[r * len + j] * yv[r * len + j];
      for (std::size_t j = 0; j < len; ++j) dx[r * len + j] += yv[r * len + j] * (g[r * len + j] - dot);
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* in = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = in[i] / (T{1} + std::exp(-in[i]));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto dx = tp.grad_out(ix);
    const T* xv = tp.value(ix).ptr();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T sig = T{1} / (T{1} + std::exp(-xv[i]));
      dx[i] += g[i] * sig * (T{1} + xv[i] * (T{1} - sig));
    }
  });
}

// Group normalisation of [B,C,H,W] with per-channel affine gamma/beta [C].
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups,
                  T eps = T(1e-5)) {
  const Shape& s = x.shape();
  detail::require(s.size() == 4, "group_norm: expected [B,C,H,W], got " + to_string(s));
  const std::size_t batch = s[0], ch = s[1], hw = s[2] * s[3];
  if (groups == 0 || ch % groups != 0) {
    throw DivisibilityError("group_norm: " + std::to_string(ch) + " channels not divisible into " +
                            std::to_string(groups) + " groups");
  }
  detail::require(gamma.value().numel() == ch && beta.value().numel() == ch,
                  "group_norm: affine parameters must have C elements");
  const std::size_t cpg = ch / groups;
  const std::size_t count = cpg * hw;

  Tensor<T> xhat(s);
  std::vector<T> inv_std(batch * groups);
  const T* in = x.value().ptr();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = (b * ch + g * cpg) * hw;
      T mean{0};
      for (std::size_t i = 0; i < count; ++i) mean += in[base + i];
      mean /= static_cast<T>(count);
      T var{0};
      for (std::size_t i = 0; i < count; ++i) {
        const T d = in[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<T>(count);
      const T is = T{1} / std::sqrt(var + eps);
      inv_std[b * groups + g] = is;
      for (std::size_t i = 0; i < count; ++i) xhat[base + i] = (in[base + i] - mean) * is;
    }
  }
  Tensor<T> out(s);
  const T* gm = gamma.value().ptr();
  const T* bt = beta.value().ptr();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * ch + c) * hw + i;
        out[idx] = gm[c] * xhat[idx] + bt[c];
      }

  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  const std::size_t ids[] = {ix, ig, ib};
  return x.tape().record(
      std::move(out), std::span<const std::size_t>(ids),
      [ix, ig, ib, batch, ch, hw, groups, cpg, count, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape<T>& tp, std::size_t self) {
        auto g = tp.grad_in(self);
        if (auto dg = tp.grad_out(ig); !dg.empty()) {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < ch; ++c)
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = (b * ch + c) * hw + i;
                dg[c] += g[idx] * xhat[idx];
              }
        }
        if (auto db = tp.grad_out(ib); !db.empty()) {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < ch; ++c)
              for (std::size_t i = 0; i < hw; ++i) db[c] += g[(b * ch + c) * hw + i];
        }
        auto dx = tp.grad_out(ix);
        if (dx.empty()) return;
        const T* gm = tp.value(ig).ptr();
        std::vector<T> dxhat(count);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t gr = 0; gr < groups; ++gr) {
            const std::size_t base = (b * ch + gr * cpg) * hw;
            T sum_d{0}, sum_dx{0};
            for (std::size_t i = 0; i < count; ++i) {
              const std::size_t c = gr * cpg + i / hw;
              dxhat[i] = g[base + i] * gm[c];
              sum_d += dxhat[i];
              sum_dx += dxhat[i] * xhat[base + i];
            }
            const T is = inv_std[b * groups + gr];
            const T n = static_cast<T>(count);
            for (std::size_t i = 0; i < count; ++i) {
              dx[base + i] += is / n * (n * dxhat[i] - sum_d - xhat[base + i] * sum_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

// a + b where b's shape equals a trailing suffix of a's shape.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool suffix = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!suffix) throw ShapeMismatch("add: " + to_string(sb) + " does not broadcast onto " + to_string(sa));
  const std::size_t inner = b.value().numel();
  Tensor<T> out(a.value());
  const T* bv = b.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i % inner];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, inner](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    if (auto da = tp.grad_out(ia); !da.empty())
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (auto db = tp.grad_out(ib); !db.empty())
      for (std::size_t i = 0; i < g.size(); ++i) db[i % inner] += g[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require(a.shape() == b.shape(), "sub: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out(a.value());
  const T* bv = b.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    if (auto da = tp.grad_out(ia); !da.empty())
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (auto db = tp.grad_out(ib); !db.empty())
      for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require(a.shape() == b.shape(), "mul: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out(a.value());
  const T* bv = b.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    const T* av = tp.value(ia).ptr();
    const T* bv = tp.value(ib).ptr();
    if (auto da = tp.grad_out(ia); !da.empty())
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    if (auto db = tp.grad_out(ib); !db.empty())
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.value());
  for (auto& v : out.data()) v *= s;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, s](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto da = tp.grad_out(ia);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * s;
  });
}

// x[B,C,H,W] + v[B,C] broadcast over the spatial axes.
template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
  detail::require_same_tape(x, v);
  const Shape& s = x.shape();
  detail::require(s.size() == 4 && v.shape() == Shape{s[0], s[1]},
                  "add_channel: " + to_string(v.shape()) + " onto " + to_string(s));
  const std::size_t bc = s[0] * s[1], hw = s[2] * s[3];
  Tensor<T> out(x.value());
  const T* vv = v.value().ptr();
  for (std::size_t i = 0; i < bc; ++i)
    for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] += vv[i];
  const auto ix = x.id(), iv = v.id();
  return x.tape().record(std::move(out), {ix, iv}, [ix, iv, bc, hw](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    if (auto dx = tp.grad_out(ix); !dx.empty())
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    if (auto dv = tp.grad_out(iv); !dv.empty())
      for (std::size_t i = 0; i < bc; ++i)
        for (std::size_t j = 0; j < hw; ++j) dv[i] += g[i * hw + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0;
  for (T v : a.value().data()) acc += v;
  const auto ia = a.id();
  return a.tape().record(Tensor<T>::scalar(static_cast<T>(acc)), {ia}, [ia](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad_in(self)[0];
    for (auto& d : tp.grad_out(ia)) d += g;
  });
}

// Mean of (a - b)^2 over all elements.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  detail::require_same_tape(a, b);
  detail::require(a.shape() == b.shape(), "mse: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const std::size_t n = a.value().numel();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.value()[i]) - static_cast<double>(b.value()[i]);
    acc += d * d;
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), {ia, ib},
                         [ia, ib, n](Tape<T>& tp, std::size_t self) {
                           const T g = tp.grad_in(self)[0] * T{2} / static_cast<T>(n);
                           const T* av = tp.value(ia).ptr();
                           const T* bv = tp.value(ib).ptr();
                           if (auto da = tp.grad_out(ia); !da.empty())
                             for (std::size_t i = 0; i < n; ++i) da[i] += g * (av[i] - bv[i]);
                           if (auto db = tp.grad_out(ib); !db.empty())
                             for (std::size_t i = 0; i < n; ++i) db[i] -= g * (av[i] - bv[i]);
                         });
}

// Mean over the second-to-last axis: [..., L, d] -> [..., 1, d].
template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  const Shape& s = a.shape();
  detail::require(s.size() >= 2, "mean_rows: rank must be >= 2");
  const std::size_t len = s[s.size() - 2], d = s.back();
  const std::size_t outer = a.value().numel() / (len * d);
  Shape os = s;
  os[os.size() - 2] = 1;
  Tensor<T> out(os);
  const T* in = a.value().ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t j = 0; j < d; ++j) out[o * d + j] += in[(o * len + l) * d + j];
    for (std::size_t j = 0; j < d; ++j) out[o * d + j] /= static_cast<T>(len);
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, outer, len, d](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto da = tp.grad_out(ia);
    const T inv = T{1} / static_cast<T>(len);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t j = 0; j < d; ++j) da[(o * len + l) * d + j] += g[o * d + j] * inv;
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  detail::require(numel(shape) == a.value().numel(),
                  "reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  const auto ia = a.id();
  return a.tape().record(a.value().reshaped(std::move(shape)), {ia}, [ia](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto da = tp.grad_out(ia);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
  });
}

// Concatenation along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no parts");
  const Shape& s0 = parts[0].shape();
  detail::require(axis < s0.size(), "concat: axis out of range");
  Shape os = s0;
  os[axis] = 0;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    detail::require(ok, "concat: " + to_string(s) + " incompatible with " + to_string(s0) + " on axis " +
                            std::to_string(axis));
    os[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  const std::size_t out_row = os[axis] * inner;

  Tensor<T> out(os);
  std::vector<std::size_t> ids, widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    const T* src = p.value().ptr();
    for (std::size_t o = 0; o < outer; ++o) std::copy(src + o * w, src + (o + 1) * w, out.ptr() + o * out_row + offset);
    ids.push_back(p.id());
    widths.push_back(w);
    offset += w;
  }
  auto& tape = parts[0].tape();
  return tape.record(std::move(out), std::span<const std::size_t>(ids),
                     [ids, widths, outer, out_row](Tape<T>& tp, std::size_t self) {
                       auto g = tp.grad_in(self);
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < ids.size(); ++p) {
                         const std::size_t w = widths[p];
                         if (auto d = tp.grad_out(ids[p]); !d.empty()) {
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < w; ++i) d[o * w + i] += g[o * out_row + off + i];
                         }
                         off += w;
                       }
                     });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  return concat(std::span<const Var<T>>(parts), axis);
}

// Stacks [L_i, d] blocks along the sequence axis into [sum L_i, d].
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  for (const auto& p : parts) detail::require(p.rank() == 2, "concat_rows: parts must be [L, d]");
  return concat(parts, 0);
}

// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Var<T> stack(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "stack: no parts");
  std::vector<Var<T>> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    lifted.push_back(reshape(p, s));
  }
  return concat(lifted, 0);
}

// Row i of a [B, ...] tensor as a [...] tensor.
template <typename T>
Var<T> select(const Var<T>& a, std::size_t index) {
  const Shape& s = a.shape();
  detail::require(s.size() >= 2 && index < s[0], "select: index out of range");
  Shape os(s.begin() + 1, s.end());
  const std::size_t w = numel(os);
  std::vector<T> buf(a.value().ptr() + index * w, a.value().ptr() + (index + 1) * w);
  const auto ia = a.id();
  return a.tape().record(Tensor<T>(os, std::move(buf)), {ia}, [ia, index, w](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto da = tp.grad_out(ia);
    for (std::size_t i = 0; i < w; ++i) da[index * w + i] += g[i];
  });
}

// [B,C,H,W] -> [B,H*W,C]
template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 4, "to_tokens: expected [B,C,H,W]");
  const std::size_t batch = s[0], ch = s[1], hw = s[2] * s[3];
  Tensor<T> out(Shape{batch, hw, ch});
  const T* in = x.value().ptr();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < hw; ++i) out[(b * hw + i) * ch + c] = in[(b * ch + c) * hw + i];
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, batch, ch, hw](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto dx = tp.grad_out(ix);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t i = 0; i < hw; ++i) dx[(b * ch + c) * hw + i] += g[(b * hw + i) * ch + c];
  });
}

// [B,H*W,C] -> [B,C,H,W]
template <typename T>
Var<T> from_tokens(const Var<T>& x, std::size_t height, std::size_t width) {
  const Shape& s = x.shape();
  detail::require(s.size() == 3 && s[1] == height * width, "from_tokens: token count does not match H*W");
  const std::size_t batch = s[0], ch = s[2], hw = s[1];
  Tensor<T> out(Shape{batch, ch, height, width});
  const T* in = x.value().ptr();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < hw; ++i) out[(b * ch + c) * hw + i] = in[(b * hw + i) * ch + c];
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, batch, ch, hw](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto dx = tp.grad_out(ix);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t i = 0; i < hw; ++i) dx[(b * hw + i) * ch + c] += g[(b * ch + c) * hw + i];
  });
}

// Nearest-neighbour 2x upsampling of [B,C,H,W].
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 4, "upsample2x: expected [B,C,H,W]");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor<T> out(Shape{s[0], s[1], 2 * h, 2 * w});
  const T* in = x.value().ptr();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) out[(p * 2 * h + i) * 2 * w + j] = in[(p * h + i / 2) * w + j / 2];
  const auto ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, planes, h, w](Tape<T>& tp, std::size_t self) {
    auto g = tp.grad_in(self);
    auto dx = tp.grad_out(ix);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < 2 * w; ++j) dx[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * 2 * w + j];
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

struct ConvGeom {
  std::size_t c, h, w, k, stride, pad, oh, ow;
  std::size_t rows() const { return c * k * k; }
  std::size_t cols() const { return oh * ow; }
};

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 && ix < static_cast<long>(g.w);
            row[oy * g.ow + ox] = inside ? img[(c * g.h + iy) * g.w + ix] : T{0};
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* img) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace detail

namespace detail {

template <typename T>
Var<T> conv2d_impl(const Var<T>& x, const Var<T>& w, const Var<T>* bias, std::size_t stride, std::size_t pad) {
  detail::require_same_tape(x, w);
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  detail::require(sx.size() == 4 && sw.size() == 4, "conv2d: expected rank-4 input and kernel");
  detail::require(sw[2] == sw[3] && sw[2] % 2 == 1, "conv2d: kernel must be square with odd size");
  if (sx[1] != sw[1]) {
    throw ShapeMismatch("conv2d: input has " + std::to_string(sx[1]) + " channels, kernel expects " +
                        std::to_string(sw[1]));
  }
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t batch = sx[0], out_ch = sw[0];
  const std::size_t k = sw[2];
  detail::require(sx[2] + 2 * pad >= k && sx[3] + 2 * pad >= k, "conv2d: kernel larger than padded input");
  const detail::ConvGeom geom{sx[1], sx[2], sx[3], k, stride, pad, (sx[2] + 2 * pad - k) / stride + 1,
                              (sx[3] + 2 * pad - k) / stride + 1};
  if (bias) detail::require(bias->value().numel() == out_ch, "conv2d: bias must have O elements");

  const std::size_t in_sz = geom.c * geom.h * geom.w;
  const std::size_t out_sz = out_ch * geom.cols();
  Tensor<T> out(Shape{batch, out_ch, geom.oh, geom.ow});
  std::vector<T> cols(batch * geom.rows() * geom.cols());
  for (std::size_t b = 0; b < batch; ++b) {
    T* col = cols.data() + b * geom.rows() * geom.cols();
    detail::im2col(x.value().ptr() + b * in_sz, geom, col);
    detail::gemm(false, false, out_ch, geom.cols(), geom.rows(), w.value().ptr(), col, out.ptr() + b * out_sz, false);
    if (bias) {
      const T* bv = bias->value().ptr();
      for (std::size_t o = 0; o < out_ch; ++o)
        for (std::size_t i = 0; i < geom.cols(); ++i) out[b * out_sz + o * geom.cols() + i] += bv[o];
    }
  }

  const auto ix = x.id(), iw = w.id();
  const std::size_t ibias = bias ? bias->id() : ix;
  const bool has_bias = bias != nullptr;
  std::vector<std::size_t> ids{ix, iw};
  if (has_bias) ids.push_back(ibias);
  return x.tape().record(
      std::move(out), std::span<const std::size_t>(ids),
      [ix, iw, ibias, has_bias, batch, out_ch, geom, in_sz, out_sz, cols = std::move(cols)](Tape<T>& tp,
                                                                                           std::size_t self) {
        auto g = tp.grad_in(self);
        const std::size_t csz = geom.rows() * geom.cols();
        if (auto dw = tp.grad_out(iw); !dw.empty()) {
          for (std::size_t b = 0; b < batch; ++b)
            detail::gemm(false, true, out_ch, geom.rows(), geom.cols(), g.data() + b * out_sz,
                         cols.data() + b * csz, dw.data(), true);
        }
        if (has_bias) {
          if (auto db = tp.grad_out(ibias); !db.empty()) {
            for (std::size_t b = 0; b < batch; ++b)
              for (std::size_t o = 0; o < out_ch; ++o)
                for (std::size_t i = 0; i < geom.cols(); ++i) db[o] += g[b * out_sz + o * geom.cols() + i];
          }
        }
        if (auto dx = tp.grad_out(ix); !dx.empty()) {
          std::vector<T> dcol(csz);
          const T* wv = tp.value(iw).ptr();
          for (std::size_t b = 0; b < batch; ++b) {
            detail::gemm(true, false, geom.rows(), geom.cols(), out_ch, wv, g.data() + b * out_sz, dcol.data(),
                         false);
            detail::col2im_add(dcol.data(), geom, dx.data() + b * in_sz);
          }
        }
      });
}

}  // namespace detail

// 2-D cross-correlation (no kernel flip) of x[B,C,H,W] with w[O,C,k,k]. k must
// be odd; pad = k/2 with stride 1 preserves H and W.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride, std::size_t pad) {
  return detail::conv2d_impl<T>(x, w, nullptr, stride, pad);
}

// As above with a per-output-channel bias [O].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  detail::require_same_tape(x, bias);
  return detail::conv2d_impl<T>(x, w, &bias, stride, pad);
}

// x[..., in] * W[in, out] (+ b[out])
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight) {
  return matmul(x, weight);
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  return add(matmul(x, weight), bias);
}

}  // namespace vfd
