#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "envformer/gemm.hpp"
#include "envformer/rng.hpp"
#include "envformer/tensor.hpp"

namespace envformer {

// ============================================================================
// Differentiable ops. Every op:
//   * validates shapes (DimensionError carries both operand shapes),
//   * computes the forward value,
//   * scans the output for NaN/Inf when the tape has finite checks enabled,
//   * records a backward closure when the tape is recording and any input
//     requires grad.
// Backward closures accumulate (+=) into input gradients.
// ============================================================================

namespace detail {

// Broadcast relation used by binary elementwise ops: b must be either
// the same shape as a, a strict suffix of a's shape, or a scalar.
enum class Broadcast { same, suffix, scalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b,
                         const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) return Broadcast::same;
  if (b.numel() == 1) return Broadcast::scalar;
  if (sb.size() < sa.size() &&
      std::equal(sb.begin(), sb.end(), sa.end() - sb.size()))
    return Broadcast::suffix;
  throw DimensionError(std::string(op) + ": shapes not broadcastable", sa, sb);
}

template <typename T>
void finish(Tape<T>& tape, const char* op, const std::vector<Tensor<T>>& ins,
            Tensor<T>& out, std::function<void()> backward) {
  if (tape.check_finite()) ensure_finite(out, op);
  bool track = false;
  for (const auto& in : ins) track = track || in.requires_grad();
  if (track && tape.recording()) tape.record(op, ins, out, std::move(backward));
}

template <typename T>
bool needs_grad(const Tape<T>& tape, const Tensor<T>& x) {
  return tape.recording() && x.requires_grad();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary elementwise with suffix/scalar broadcast of the right operand.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  using detail::Broadcast;
  const Broadcast kind = detail::broadcast_kind(a, b, "add");
  const std::size_t n = a.numel(), m = b.numel();
  bool track = tape.recording() && (a.requires_grad() || b.requires_grad());
  Tensor<T> out = Tensor<T>::make(a.shape(), track);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (kind == Broadcast::same) {
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  } else if (kind == Broadcast::scalar) {
    const T s = pb[0];
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + s;
  } else {
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % m];
  }
  detail::finish(tape, "add", {a, b}, out, [ai = a.impl(), bi = b.impl(),
                                            oi = out.impl(), kind, n, m] {
    const T* g = oi->grad.data();
    if (ai->requires_grad) {
      T* da = ai->grad.data();
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
    }
    if (bi->requires_grad) {
      T* db = bi->grad.data();
      if (kind == Broadcast::same) {
        for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
      } else if (kind == Broadcast::scalar) {
        T acc = 0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i];
        db[0] += acc;
      } else {
        for (std::size_t i = 0; i < n; ++i) db[i % m] += g[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  using detail::Broadcast;
  const Broadcast kind = detail::broadcast_kind(a, b, "sub");
  const std::size_t n = a.numel(), m = b.numel();
  bool track = tape.recording() && (a.requires_grad() || b.requires_grad());
  Tensor<T> out = Tensor<T>::make(a.shape(), track);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (kind == Broadcast::same) {
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  } else if (kind == Broadcast::scalar) {
    const T s = pb[0];
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - s;
  } else {
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i % m];
  }
  detail::finish(tape, "sub", {a, b}, out, [ai = a.impl(), bi = b.impl(),
                                            oi = out.impl(), kind, n, m] {
    const T* g = oi->grad.data();
    if (ai->requires_grad) {
      T* da = ai->grad.data();
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
    }
    if (bi->requires_grad) {
      T* db = bi->grad.data();
      if (kind == Broadcast::same) {
        for (std::size_t i = 0; i < n; ++i) db[i] -= g[i];
      } else if (kind == Broadcast::scalar) {
        T acc = 0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i];
        db[0] -= acc;
      } else {
        for (std::size_t i = 0; i < n; ++i) db[i % m] -= g[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  using detail::Broadcast;
  const Broadcast kind = detail::broadcast_kind(a, b, "mul");
  const std::size_t n = a.numel(), m = b.numel();
  bool track = tape.recording() && (a.requires_grad() || b.requires_grad());
  Tensor<T> out = Tensor<T>::make(a.shape(), track);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (kind == Broadcast::same) {
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  } else if (kind == Broadcast::scalar) {
    const T s = pb[0];
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  } else {
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i % m];
  }
  detail::finish(tape, "mul", {a, b}, out, [ai = a.impl(), bi = b.impl(),
                                            oi = out.impl(), kind, n, m] {
    const T* g = oi->grad.data();
    const T* pa = ai->value.data.data();
    const T* pb = bi->value.data.data();
    if (ai->requires_grad) {
      T* da = ai->grad.data();
      if (kind == Broadcast::same) {
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * pb[i];
      } else if (kind == Broadcast::scalar) {
        const T s = pb[0];
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * s;
      } else {
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * pb[i % m];
      }
    }
    if (bi->requires_grad) {
      T* db = bi->grad.data();
      if (kind == Broadcast::same) {
        for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * pa[i];
      } else if (kind == Broadcast::scalar) {
        T acc = 0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i] * pa[i];
        db[0] += acc;
      } else {
        for (std::size_t i = 0; i < n; ++i) db[i % m] += g[i] * pa[i];
      }
    }
  });
  return out;
}

/// Elementwise division, same shapes only.
template <typename T>
Tensor<T> div(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("div: shapes must match", a.shape(), b.shape());
  const std::size_t n = a.numel();
  bool track = tape.recording() && (a.requires_grad() || b.requires_grad());
  Tensor<T> out = Tensor<T>::make(a.shape(), track);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  detail::finish(tape, "div", {a, b}, out,
                 [ai = a.impl(), bi = b.impl(), oi = out.impl(), n] {
                   const T* g = oi->grad.data();
                   const T* pa = ai->value.data.data();
                   const T* pb = bi->value.data.data();
                   if (ai->requires_grad) {
                     T* da = ai->grad.data();
                     for (std::size_t i = 0; i < n; ++i) da[i] += g[i] / pb[i];
                   }
                   if (bi->requires_grad) {
                     T* db = bi->grad.data();
                     for (std::size_t i = 0; i < n; ++i)
                       db[i] -= g[i] * pa[i] / (pb[i] * pb[i]);
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Scalar-constant arithmetic.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T c) {
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::make(a.shape(), detail::needs_grad(tape, a));
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  detail::finish(tape, "scale", {a}, out, [ai = a.impl(), oi = out.impl(), c, n] {
    if (!ai->requires_grad) return;
    const T* g = oi->grad.data();
    T* da = ai->grad.data();
    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * c;
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T c) {
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::make(a.shape(), detail::needs_grad(tape, a));
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + c;
  detail::finish(tape, "add_scalar", {a}, out,
                 [ai = a.impl(), oi = out.impl(), n] {
                   if (!ai->requires_grad) return;
                   const T* g = oi->grad.data();
                   T* da = ai->grad.data();
                   for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
                 });
  return out;
}

template <typename T>
Tensor<T> neg(Tape<T>& tape, const Tensor<T>& a) {
  return scale(tape, a, T(-1));
}

// ---------------------------------------------------------------------------
// Unary elementwise.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::make(a.shape(), detail::needs_grad(tape, a));
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  detail::finish(tape, "relu", {a}, out, [ai = a.impl(), oi = out.impl(), n] {
    if (!ai->requires_grad) return;
    const T* g = oi->grad.data();
    const T* pa = ai->value.data.data();
    T* da = ai->grad.data();
    for (std::size_t i = 0; i < n; ++i)
      if (pa[i] > T(0)) da[i] += g[i];
  });
  return out;
}

template <typename T>
Tensor<T> tanh_op(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::make(a.shape(), detail::needs_grad(tape, a));
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
  detail::finish(tape, "tanh", {a}, out, [ai = a.impl(), oi = out.impl(), n] {
    if (!ai->requires_grad) return;
    const T* g = oi->grad.data();
    const T* y = oi->value.data.data();
    T* da = ai->grad.data();
    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * (T(1) - y[i] * y[i]);
  });
  return out;
}

template <typename T>
Tensor<T> exp_op(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::make(a.shape(), detail::needs_grad(tape, a));
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
  detail::finish(tape, "exp", {a}, out, [ai = a.impl(), oi = out.impl(), n] {
    if (!ai->requires_grad) return;
    const T* g = oi->grad.data();
    const T* y = oi->value.data.data();
    T* da = ai->grad.data();
    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * y[i];
  });
  return out;
}

template <typename T>
Tensor<T> log_op(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::make(a.shape(), detail::needs_grad(tape, a));
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = std::log(pa[i]);
  detail::finish(tape, "log", {a}, out, [ai = a.impl(), oi = out.impl(), n] {
    if (!ai->requires_grad) return;
    const T* g = oi->grad.data();
    const T* pa = ai->value.data.data();
    T* da = ai->grad.data();
    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] / pa[i];
  });
  return out;
}

template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::make(a.shape(), detail::needs_grad(tape, a));
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pa[i];
  detail::finish(tape, "square", {a}, out, [ai = a.impl(), oi = out.impl(), n] {
    if (!ai->requires_grad) return;
    const T* g = oi->grad.data();
    const T* pa = ai->value.data.data();
    T* da = ai->grad.data();
    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * T(2) * pa[i];
  });
  return out;
}

template <typename T>
Tensor<T> sqrt_op(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::make(a.shape(), detail::needs_grad(tape, a));
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = std::sqrt(pa[i]);
  detail::finish(tape, "sqrt", {a}, out, [ai = a.impl(), oi = out.impl(), n] {
    if (!ai->requires_grad) return;
    const T* g = oi->grad.data();
    const T* y = oi->value.data.data();
    T* da = ai->grad.data();
    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * T(0.5) / y[i];
  });
  return out;
}

/// Numerically stable log(1 + exp(x)).
template <typename T>
Tensor<T> softplus(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t n = a.numel();
  Tensor<T> out = Tensor<T>::make(a.shape(), detail::needs_grad(tape, a));
  const T* pa = a.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T x = pa[i];
    po[i] = x > T(25) ? x : std::log1p(std::exp(x));
  }
  detail::finish(tape, "softplus", {a}, out,
                 [ai = a.impl(), oi = out.impl(), n] {
                   if (!ai->requires_grad) return;
                   const T* g = oi->grad.data();
                   const T* pa = ai->value.data.data();
                   T* da = ai->grad.data();
                   for (std::size_t i = 0; i < n; ++i) {
                     const T s = T(1) / (T(1) + std::exp(-pa[i]));
                     da[i] += g[i] * s;
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

/// a [..., M, K] times w [K, N] -> [..., M, N]. Leading dims of a are folded
/// into the row dimension for a single GEMM.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& w) {
  if (a.shape().size() < 2 || w.shape().size() != 2)
    throw DimensionError("matmul: need a rank>=2, w rank 2", a.shape(),
                         w.shape());
  const std::size_t k = a.shape().back();
  if (k != w.shape()[0])
    throw DimensionError("matmul: inner dimensions differ", a.shape(),
                         w.shape());
  const std::size_t rows = a.numel() / k;
  const std::size_t nn = w.shape()[1];
  std::vector<std::size_t> out_shape = a.shape();
  out_shape.back() = nn;
  bool track = tape.recording() && (a.requires_grad() || w.requires_grad());
  Tensor<T> out = Tensor<T>::make(std::move(out_shape), track);
  gemm<T>(false, false, rows, nn, k, T(1), a.data(), k, w.data(), nn, T(0),
          out.data(), nn);
  detail::finish(tape, "matmul", {a, w}, out,
                 [ai = a.impl(), wi = w.impl(), oi = out.impl(), rows, nn, k] {
                   const T* g = oi->grad.data();
                   if (ai->requires_grad)
                     gemm<T>(false, true, rows, k, nn, T(1), g, nn,
                             wi->value.data.data(), nn, T(1),
                             ai->grad.data(), k);
                   if (wi->requires_grad)
                     gemm<T>(true, false, k, nn, rows, T(1),
                             ai->value.data.data(), k, g, nn, T(1),
                             wi->grad.data(), nn);
                 });
  return out;
}

/// Batched matmul over rank-3 operands with optional transposes:
/// out[g] = op(a[g]) [M,K] times op(b[g]) [K,N].
template <typename T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b,
              bool trans_a, bool trans_b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 ||
      a.shape()[0] != b.shape()[0])
    throw DimensionError("bmm: need matching rank-3 batches", a.shape(),
                         b.shape());
  const std::size_t batch = a.shape()[0];
  const std::size_t m = trans_a ? a.shape()[2] : a.shape()[1];
  const std::size_t ka = trans_a ? a.shape()[1] : a.shape()[2];
  const std::size_t kb = trans_b ? b.shape()[2] : b.shape()[1];
  const std::size_t nn = trans_b ? b.shape()[1] : b.shape()[2];
  if (ka != kb)
    throw DimensionError("bmm: inner dimensions differ", a.shape(), b.shape());
  const std::size_t lda = a.shape()[2], ldb = b.shape()[2];
  const std::size_t sa = a.shape()[1] * a.shape()[2];
  const std::size_t sb = b.shape()[1] * b.shape()[2];
  const std::size_t so = m * nn;
  bool track = tape.recording() && (a.requires_grad() || b.requires_grad());
  Tensor<T> out = Tensor<T>::make({batch, m, nn}, track);
  for (std::size_t gidx = 0; gidx < batch; ++gidx)
    gemm<T>(trans_a, trans_b, m, nn, ka, T(1), a.data() + gidx * sa, lda,
            b.data() + gidx * sb, ldb, T(0), out.data() + gidx * so, nn);
  detail::finish(
      tape, "bmm", {a, b}, out,
      [ai = a.impl(), bi = b.impl(), oi = out.impl(), trans_a, trans_b, batch,
       m, nn, ka, lda, ldb, sa, sb, so] {
        const T* pa = ai->value.data.data();
        const T* pb = bi->value.data.data();
        const T* g = oi->grad.data();
        for (std::size_t gi = 0; gi < batch; ++gi) {
          const T* ga = pa + gi * sa;
          const T* gb = pb + gi * sb;
          const T* gg = g + gi * so;
          if (ai->requires_grad) {
            T* da = ai->grad.data() + gi * sa;
            if (!trans_a && !trans_b)        // dA = G B^T
              gemm<T>(false, true, m, ka, nn, T(1), gg, nn, gb, ldb, T(1), da,
                      lda);
            else if (trans_a && !trans_b)    // dA = B G^T
              gemm<T>(false, true, ka, m, nn, T(1), gb, ldb, gg, nn, T(1), da,
                      lda);
            else if (!trans_a && trans_b)    // dA = G B
              gemm<T>(false, false, m, ka, nn, T(1), gg, nn, gb, ldb, T(1), da,
                      lda);
            else                             // dA = B^T G^T
              gemm<T>(true, true, ka, m, nn, T(1), gb, ldb, gg, nn, T(1), da,
                      lda);
          }
          if (bi->requires_grad) {
            T* db = bi->grad.data() + gi * sb;
            if (!trans_a && !trans_b)        // dB = A^T G
              gemm<T>(true, false, ka, nn, m, T(1), ga, lda, gg, nn, T(1), db,
                      ldb);
            else if (trans_a && !trans_b)    // dB = A G
              gemm<T>(false, false, ka, nn, m, T(1), ga, lda, gg, nn, T(1), db,
                      ldb);
            else if (!trans_a && trans_b)    // dB = G^T A
              gemm<T>(true, false, nn, ka, m, T(1), gg, nn, ga, lda, T(1), db,
                      ldb);
            else                             // dB = G^T A^T
              gemm<T>(true, true, nn, ka, m, T(1), gg, nn, ga, lda, T(1), db,
                      ldb);
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation.
// ---------------------------------------------------------------------------

/// [B, S, H*D] -> [B*H, S, D]: regroup the feature dim into per-head slabs.
template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads) {
  if (x.shape().size() != 3 || x.shape()[2] % heads != 0)
    throw DimensionError("split_heads: need [B,S,H*D]", x.shape(), {heads});
  const std::size_t b = x.shape()[0], s = x.shape()[1], c = x.shape()[2];
  const std::size_t d = c / heads;
  Tensor<T> out =
      Tensor<T>::make({b * heads, s, d}, detail::needs_grad(tape, x));
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t ib = 0; ib < b; ++ib)
    for (std::size_t is = 0; is < s; ++is)
      for (std::size_t ih = 0; ih < heads; ++ih)
        std::memcpy(po + ((ib * heads + ih) * s + is) * d,
                    px + (ib * s + is) * c + ih * d, d * sizeof(T));
  detail::finish(tape, "split_heads", {x}, out,
                 [xi = x.impl(), oi = out.impl(), b, s, heads, d, c] {
                   if (!xi->requires_grad) return;
                   const T* g = oi->grad.data();
                   T* dx = xi->grad.data();
                   for (std::size_t ib = 0; ib < b; ++ib)
                     for (std::size_t is = 0; is < s; ++is)
                       for (std::size_t ih = 0; ih < heads; ++ih) {
                         const T* src = g + ((ib * heads + ih) * s + is) * d;
                         T* dst = dx + (ib * s + is) * c + ih * d;
                         for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
                       }
                 });
  return out;
}

/// Inverse of split_heads: [B*H, S, D] -> [B, S, H*D].
template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads) {
  if (x.shape().size() != 3 || x.shape()[0] % heads != 0)
    throw DimensionError("merge_heads: need [B*H,S,D]", x.shape(), {heads});
  const std::size_t b = x.shape()[0] / heads, s = x.shape()[1],
                    d = x.shape()[2];
  const std::size_t c = heads * d;
  Tensor<T> out = Tensor<T>::make({b, s, c}, detail::needs_grad(tape, x));
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t ib = 0; ib < b; ++ib)
    for (std::size_t is = 0; is < s; ++is)
      for (std::size_t ih = 0; ih < heads; ++ih)
        std::memcpy(po + (ib * s + is) * c + ih * d,
                    px + ((ib * heads + ih) * s + is) * d, d * sizeof(T));
  detail::finish(tape, "merge_heads", {x}, out,
                 [xi = x.impl(), oi = out.impl(), b, s, heads, d, c] {
                   if (!xi->requires_grad) return;
                   const T* g = oi->grad.data();
                   T* dx = xi->grad.data();
                   for (std::size_t ib = 0; ib < b; ++ib)
                     for (std::size_t is = 0; is < s; ++is)
                       for (std::size_t ih = 0; ih < heads; ++ih) {
                         const T* src = g + (ib * s + is) * c + ih * d;
                         T* dst = dx + ((ib * heads + ih) * s + is) * d;
                         for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
                       }
                 });
  return out;
}

/// Concatenate along the last dimension; leading dims must match.
template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != b.shape().size() || a.shape().empty() ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin()))
    throw DimensionError("concat_cols: leading dims differ", a.shape(),
                         b.shape());
  const std::size_t rows = a.value().fold_rows();
  const std::size_t ca = a.shape().back(), cb = b.shape().back();
  std::vector<std::size_t> out_shape = a.shape();
  out_shape.back() = ca + cb;
  bool track = tape.recording() && (a.requires_grad() || b.requires_grad());
  Tensor<T> out = Tensor<T>::make(std::move(out_shape), track);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::memcpy(po + r * (ca + cb), pa + r * ca, ca * sizeof(T));
    std::memcpy(po + r * (ca + cb) + ca, pb + r * cb, cb * sizeof(T));
  }
  detail::finish(tape, "concat_cols", {a, b}, out,
                 [ai = a.impl(), bi = b.impl(), oi = out.impl(), rows, ca, cb] {
                   const T* g = oi->grad.data();
                   if (ai->requires_grad) {
                     T* da = ai->grad.data();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < ca; ++j)
                         da[r * ca + j] += g[r * (ca + cb) + j];
                   }
                   if (bi->requires_grad) {
                     T* db = bi->grad.data();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < cb; ++j)
                         db[r * cb + j] += g[r * (ca + cb) + ca + j];
                   }
                 });
  return out;
}

/// Take columns [c0, c0+len) of the last dimension.
template <typename T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& x, std::size_t c0,
                     std::size_t len) {
  const std::size_t c = x.shape().back();
  if (c0 + len > c)
    throw DimensionError("slice_cols: range out of bounds", x.shape(),
                         {c0, len});
  const std::size_t rows = x.value().fold_rows();
  std::vector<std::size_t> out_shape = x.shape();
  out_shape.back() = len;
  Tensor<T> out =
      Tensor<T>::make(std::move(out_shape), detail::needs_grad(tape, x));
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(po + r * len, px + r * c + c0, len * sizeof(T));
  detail::finish(tape, "slice_cols", {x}, out,
                 [xi = x.impl(), oi = out.impl(), rows, c, c0, len] {
                   if (!xi->requires_grad) return;
                   const T* g = oi->grad.data();
                   T* dx = xi->grad.data();
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t j = 0; j < len; ++j)
                       dx[r * c + c0 + j] += g[r * len + j];
                 });
  return out;
}

/// Take rows [r0, r0+len) of a rank-2 tensor.
template <typename T>
Tensor<T> narrow_rows(Tape<T>& tape, const Tensor<T>& x, std::size_t r0,
                      std::size_t len) {
  if (x.shape().size() != 2 || r0 + len > x.shape()[0])
    throw DimensionError("narrow_rows: range out of bounds", x.shape(),
                         {r0, len});
  const std::size_t c = x.shape()[1];
  Tensor<T> out = Tensor<T>::make({len, c}, detail::needs_grad(tape, x));
  std::memcpy(out.data(), x.data() + r0 * c, len * c * sizeof(T));
  detail::finish(tape, "narrow_rows", {x}, out,
                 [xi = x.impl(), oi = out.impl(), r0, len, c] {
                   if (!xi->requires_grad) return;
                   const T* g = oi->grad.data();
                   T* dx = xi->grad.data() + r0 * c;
                   for (std::size_t i = 0; i < len * c; ++i) dx[i] += g[i];
                 });
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x,
                  std::vector<std::size_t> new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw DimensionError("reshape: element count differs", x.shape(),
                         new_shape);
  Tensor<T> out =
      Tensor<T>::make(std::move(new_shape), detail::needs_grad(tape, x));
  std::memcpy(out.data(), x.data(), x.numel() * sizeof(T));
  detail::finish(tape, "reshape", {x}, out,
                 [xi = x.impl(), oi = out.impl(), n = x.numel()] {
                   if (!xi->requires_grad) return;
                   const T* g = oi->grad.data();
                   T* dx = xi->grad.data();
                   for (std::size_t i = 0; i < n; ++i) dx[i] += g[i];
                 });
  return out;
}

/// Value copy that is cut off from the graph.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return Tensor<T>::constant(x.value());
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t n = x.numel();
  Tensor<T> out = Tensor<T>::make({1}, detail::needs_grad(tape, x));
  const T* px = x.data();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += px[i];
  out.data()[0] = acc;
  detail::finish(tape, "sum_all", {x}, out,
                 [xi = x.impl(), oi = out.impl(), n] {
                   if (!xi->requires_grad) return;
                   const T g = oi->grad[0];
                   T* dx = xi->grad.data();
                   for (std::size_t i = 0; i < n; ++i) dx[i] += g;
                 });
  return out;
}

template <typename T>
Tensor<T> mean_all(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw ContractError("mean_all: empty tensor");
  Tensor<T> out = Tensor<T>::make({1}, detail::needs_grad(tape, x));
  const T* px = x.data();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += px[i];
  out.data()[0] = acc / static_cast<T>(n);
  detail::finish(tape, "mean_all", {x}, out,
                 [xi = x.impl(), oi = out.impl(), n] {
                   if (!xi->requires_grad) return;
                   const T g = oi->grad[0] / static_cast<T>(n);
                   T* dx = xi->grad.data();
                   for (std::size_t i = 0; i < n; ++i) dx[i] += g;
                 });
  return out;
}

/// log(sum(exp(x))) across the last dimension, stabilized by the row max.
/// Output keeps the rank with last dim 1.
template <typename T>
Tensor<T> logsumexp_last(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.value().fold_rows();
  if (c == 0) throw ContractError("logsumexp_last: empty last dimension");
  std::vector<std::size_t> out_shape = x.shape();
  out_shape.back() = 1;
  Tensor<T> out =
      Tensor<T>::make(std::move(out_shape), detail::needs_grad(tape, x));
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * c;
    T mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T acc = 0;
    for (std::size_t j = 0; j < c; ++j) acc += std::exp(row[j] - mx);
    po[r] = mx + std::log(acc);
  }
  detail::finish(tape, "logsumexp_last", {x}, out,
                 [xi = x.impl(), oi = out.impl(), rows, c] {
                   if (!xi->requires_grad) return;
                   const T* g = oi->grad.data();
                   const T* px = xi->value.data.data();
                   const T* po = oi->value.data.data();
                   T* dx = xi->grad.data();
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t j = 0; j < c; ++j)
                       dx[r * c + j] += g[r] * std::exp(px[r * c + j] - po[r]);
                 });
  return out;
}

/// Elementwise minimum of two same-shape tensors (subgradient: ties go left).
template <typename T>
Tensor<T> min_elem(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("min_elem: shapes must match", a.shape(), b.shape());
  const std::size_t n = a.numel();
  bool track = tape.recording() && (a.requires_grad() || b.requires_grad());
  Tensor<T> out = Tensor<T>::make(a.shape(), track);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] <= pb[i] ? pa[i] : pb[i];
  detail::finish(tape, "min_elem", {a, b}, out,
                 [ai = a.impl(), bi = b.impl(), oi = out.impl(), n] {
                   const T* g = oi->grad.data();
                   const T* pa = ai->value.data.data();
                   const T* pb = bi->value.data.data();
                   for (std::size_t i = 0; i < n; ++i) {
                     if (pa[i] <= pb[i]) {
                       if (ai->requires_grad) ai->grad[i] += g[i];
                     } else {
                       if (bi->requires_grad) bi->grad[i] += g[i];
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization / regularization.
// ---------------------------------------------------------------------------

/// Softmax over the last dimension, max-shifted per row.
template <typename T>
Tensor<T> softmax_last(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.value().fold_rows();
  Tensor<T> out = Tensor<T>::make(x.shape(), detail::needs_grad(tape, x));
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * c;
    T* orow = po + r * c;
    T mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T acc = 0;
    for (std::size_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      acc += orow[j];
    }
    const T inv = T(1) / acc;
    for (std::size_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  detail::finish(tape, "softmax_last", {x}, out,
                 [xi = x.impl(), oi = out.impl(), rows, c] {
                   if (!xi->requires_grad) return;
                   const T* g = oi->grad.data();
                   const T* y = oi->value.data.data();
                   T* dx = xi->grad.data();
                   for (std::size_t r = 0; r < rows; ++r) {
                     const T* gr = g + r * c;
                     const T* yr = y + r * c;
                     T dot = 0;
                     for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
                     T* dr = dx + r * c;
                     for (std::size_t j = 0; j < c; ++j)
                       dr[j] += yr[j] * (gr[j] - dot);
                   }
                 });
  return out;
}

/// Layer normalization over the last dimension with learned gain and bias
/// (shape [C]). Uses the population variance of each row.
template <typename T>
Tensor<T> layernorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                    const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t c = x.shape().back();
  if (gain.shape() != std::vector<std::size_t>{c} ||
      bias.shape() != std::vector<std::size_t>{c})
    throw DimensionError("layernorm: gain/bias must be [C]", x.shape(),
                         gain.shape());
  const std::size_t rows = x.value().fold_rows();
  bool track = tape.recording() && (x.requires_grad() ||
                                    gain.requires_grad() ||
                                    bias.requires_grad());
  Tensor<T> out = Tensor<T>::make(x.shape(), track);
  // Cache normalized activations and reciprocal stddevs for backward.
  auto xhat = std::make_shared<std::vector<T>>(rows * c);
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const T* px = x.data();
  const T* pg = gain.data();
  const T* pb = bias.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * c;
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    T* xh = xhat->data() + r * c;
    T* orow = po + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      xh[j] = (row[j] - mean) * rs;
      orow[j] = xh[j] * pg[j] + pb[j];
    }
  }
  detail::finish(
      tape, "layernorm", {x, gain, bias}, out,
      [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl(),
       xhat, rstd, rows, c] {
        const T* g = oi->grad.data();
        const T* pg = gi->value.data.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g + r * c;
          const T* xh = xhat->data() + r * c;
          if (gi->requires_grad || bi->requires_grad) {
            for (std::size_t j = 0; j < c; ++j) {
              if (gi->requires_grad) gi->grad[j] += gr[j] * xh[j];
              if (bi->requires_grad) bi->grad[j] += gr[j];
            }
          }
          if (xi->requires_grad) {
            T mean_gh = 0, mean_ghx = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const T gh = gr[j] * pg[j];
              mean_gh += gh;
              mean_ghx += gh * xh[j];
            }
            mean_gh /= static_cast<T>(c);
            mean_ghx /= static_cast<T>(c);
            T* dx = xi->grad.data() + r * c;
            const T rs = (*rstd)[r];
            for (std::size_t j = 0; j < c; ++j) {
              const T gh = gr[j] * pg[j];
              dx[j] += rs * (gh - mean_gh - xh[j] * mean_ghx);
            }
          }
        }
      });
  return out;
}

/// Inverted dropout. In eval mode (tape not training) this is an exact
/// identity and returns the input tensor itself. keep_prob must be in (0, 1].
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double keep_prob,
                  Rng& rng) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0))
    throw ContractError("dropout: keep_prob must be in (0, 1]");
  if (!tape.training() || keep_prob == 1.0) return x;
  const std::size_t n = x.numel();
  Tensor<T> out = Tensor<T>::make(x.shape(), detail::needs_grad(tape, x));
  auto mask = std::make_shared<std::vector<T>>(n);
  const T inv = static_cast<T>(1.0 / keep_prob);
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T m = rng.uniform() < keep_prob ? inv : T(0);
    (*mask)[i] = m;
    po[i] = px[i] * m;
  }
  detail::finish(tape, "dropout", {x}, out,
                 [xi = x.impl(), oi = out.impl(), mask, n] {
                   if (!xi->requires_grad) return;
                   const T* g = oi->grad.data();
                   T* dx = xi->grad.data();
                   for (std::size_t i = 0; i < n; ++i)
                     dx[i] += g[i] * (*mask)[i];
                 });
  return out;
}

}  // namespace envformer
