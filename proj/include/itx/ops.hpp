#pragma once

#include <memory>
#include <mutex>

#include "itx/autograd.hpp"
#include "itx/kernels.hpp"
#include "itx/window.hpp"

// Tape-level operations. Each wraps a kernel forward and registers the
// matching backward rule. Backward closures read parent values from the
// graph instead of copying tensors.

namespace itx {
namespace ad {

using Id = int32_t;

// ---------------------------------------------------------------------------
// index-map plumbing shared by gather-style ops
// ---------------------------------------------------------------------------

using IndexMap = std::shared_ptr<const std::vector<int64_t>>;

inline IndexMap cached_inverse_index_map(MatrixLayout layout, Dims5 d,
                                         WindowSpec ws) {
  using Key = std::tuple<int, int64_t, int64_t, int64_t, int64_t, int64_t,
                         int64_t, int64_t>;
  static std::map<Key, IndexMap> cache;
  static std::mutex mu;
  Key key{static_cast<int>(layout), d.b, d.c, d.f, d.h, d.w,
          layout == MatrixLayout::Frame ? 0 : ws.window,
          layout == MatrixLayout::Frame ? 0 : ws.patch};
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto fwd = cached_index_map(layout, d, ws);
  auto inv = std::make_shared<std::vector<int64_t>>(fwd->size());
  for (int64_t i = 0; i < static_cast<int64_t>(fwd->size()); ++i)
    (*inv)[(*fwd)[i]] = i;
  IndexMap out = inv;
  cache.emplace(key, out);
  return out;
}

/// out[i] = x[map[i]]; backward scatter-adds, so the map does not have to
/// be a bijection (padding repeats sources, cropping drops them).
template <typename T>
Id gather(GraphT<T>& g, Id x, const IndexMap& map, Dims5 out_dims) {
  const TensorT<T>& xv = g.val(x);
  TensorT<T> out(out_dims);
  check_shape(static_cast<int64_t>(map->size()) == out.size(),
              "gather: map size does not match output dims");
  const std::vector<int64_t>& m = *map;
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < out.size(); ++i) out[i] = xv[m[i]];
  return g.emit(std::move(out), {x}, [x, map](GraphT<T>& gr, Id self) {
    const TensorT<T>& dy = gr.grad(self);
    TensorT<T> dx(gr.val(x).dims());
    const std::vector<int64_t>& m = *map;
    for (int64_t i = 0; i < dy.size(); ++i) dx[m[i]] += dy[i];
    gr.accum(x, dx);
  });
}

// ---------------------------------------------------------------------------
// elementwise / structural ops
// ---------------------------------------------------------------------------

template <typename T>
Id add(GraphT<T>& g, Id a, Id b) {
  TensorT<T> out = itx::add(g.val(a), g.val(b));
  return g.emit(std::move(out), {a, b}, [a, b](GraphT<T>& gr, Id self) {
    gr.accum(a, gr.grad(self));
    gr.accum(b, gr.grad(self));
  });
}

template <typename T>
Id scale(GraphT<T>& g, Id a, T s) {
  TensorT<T> out = itx::scale(g.val(a), s);
  return g.emit(std::move(out), {a}, [a, s](GraphT<T>& gr, Id self) {
    gr.accum(a, itx::scale(gr.grad(self), s));
  });
}

template <typename T>
Id mul(GraphT<T>& g, Id a, Id b) {
  TensorT<T> out = hadamard(g.val(a), g.val(b));
  return g.emit(std::move(out), {a, b}, [a, b](GraphT<T>& gr, Id self) {
    const TensorT<T>& dy = gr.grad(self);
    if (gr.needs_grad(a)) gr.accum(a, hadamard(dy, gr.val(b)));
    if (gr.needs_grad(b)) gr.accum(b, hadamard(dy, gr.val(a)));
  });
}

/// Multiply by a constant mask (dropout). The mask is fixed per forward,
/// so backward is the same mask multiply.
template <typename T>
Id mul_mask(GraphT<T>& g, Id x, TensorT<T> mask_in) {
  auto mask = std::make_shared<const TensorT<T>>(std::move(mask_in));
  TensorT<T> out = hadamard(g.val(x), *mask);
  return g.emit(std::move(out), {x}, [x, mask](GraphT<T>& gr, Id self) {
    gr.accum(x, hadamard(gr.grad(self), *mask));
  });
}

template <typename T>
Id concat_channels(GraphT<T>& g, Id a, Id b) {
  const Dims5 da = g.val(a).dims(), db = g.val(b).dims();
  check_shape(da.b == db.b && da.f == db.f && da.h == db.h && da.w == db.w,
              "concat_channels: non-channel dims must match");
  Dims5 dd = da;
  dd.c = da.c + db.c;
  TensorT<T> out(dd);
  const TensorT<T>&va = g.val(a), &vb = g.val(b);
  for (int64_t bb = 0; bb < dd.b; ++bb)
    for (int64_t c = 0; c < dd.c; ++c)
      for (int64_t f = 0; f < dd.f; ++f) {
        const T* src = c < da.c ? va.plane(bb, c, f) : vb.plane(bb, c - da.c, f);
        std::memcpy(out.plane(bb, c, f), src,
                    sizeof(T) * static_cast<size_t>(dd.h * dd.w));
      }
  return g.emit(std::move(out), {a, b}, [a, b, da](GraphT<T>& gr, Id self) {
    const TensorT<T>& dy = gr.grad(self);
    const Dims5 dd = dy.dims();
    TensorT<T> ga(gr.val(a).dims()), gb(gr.val(b).dims());
    for (int64_t bb = 0; bb < dd.b; ++bb)
      for (int64_t c = 0; c < dd.c; ++c)
        for (int64_t f = 0; f < dd.f; ++f) {
          T* dst = c < da.c ? ga.plane(bb, c, f) : gb.plane(bb, c - da.c, f);
          std::memcpy(dst, dy.plane(bb, c, f),
                      sizeof(T) * static_cast<size_t>(dd.h * dd.w));
        }
    gr.accum(a, ga);
    gr.accum(b, gb);
  });
}

// ---------------------------------------------------------------------------
// neural ops
// ---------------------------------------------------------------------------

template <typename T>
Id conv2d(GraphT<T>& g, Id x, Id w, Id b) {
  TensorT<T> out = itx::conv2d(g.val(x), g.val(w), g.val(b));
  return g.emit(std::move(out), {x, w, b}, [x, w, b](GraphT<T>& gr, Id self) {
    const TensorT<T>& dy = gr.grad(self);
    Conv2dGrads<T> grads = conv2d_backward(gr.val(x), gr.val(w), dy);
    gr.accum(x, grads.dx);
    gr.accum(w, grads.dw);
    gr.accum(b, grads.db);
  });
}

template <typename T>
Id layer_norm(GraphT<T>& g, Id x, Id gain, Id offset, T eps) {
  auto aux = std::make_shared<LayerNormAux<T>>();
  TensorT<T> out = itx::layer_norm(g.val(x), g.val(gain), g.val(offset), eps,
                                   aux.get());
  return g.emit(std::move(out), {x, gain, offset},
                [x, gain, offset, aux](GraphT<T>& gr, Id self) {
                  LayerNormGrads<T> grads = layer_norm_backward(
                      gr.val(x), gr.val(gain), *aux, gr.grad(self));
                  gr.accum(x, grads.dx);
                  gr.accum(gain, grads.dgain);
                  gr.accum(offset, grads.doffset);
                });
}

template <typename T>
Id prelu(GraphT<T>& g, Id x, Id slope) {
  TensorT<T> out = itx::prelu(g.val(x), g.val(slope));
  return g.emit(std::move(out), {x, slope}, [x, slope](GraphT<T>& gr, Id self) {
    PreluGrads<T> grads =
        prelu_backward(gr.val(x), gr.val(slope), gr.grad(self));
    gr.accum(x, grads.dx);
    gr.accum(slope, grads.dslope);
  });
}

template <typename T>
Id patch_merge_rearrange(GraphT<T>& g, Id x) {
  TensorT<T> out = itx::patch_merge_rearrange(g.val(x));
  const Dims5 xd = g.val(x).dims();
  return g.emit(std::move(out), {x}, [x, xd](GraphT<T>& gr, Id self) {
    gr.accum(x, patch_merge_rearrange_backward(gr.grad(self), xd));
  });
}

template <typename T>
Id upsample2x(GraphT<T>& g, Id x) {
  TensorT<T> out = upsample2x_bilinear(g.val(x));
  const Dims5 xd = g.val(x).dims();
  return g.emit(std::move(out), {x}, [x, xd](GraphT<T>& gr, Id self) {
    gr.accum(x, upsample2x_bilinear_backward(gr.grad(self), xd));
  });
}

// ---------------------------------------------------------------------------
// window assembly / scatter / padding as tape ops
// ---------------------------------------------------------------------------

template <typename T>
Id assemble(GraphT<T>& g, Id x, MatrixLayout layout, WindowSpec ws) {
  const Dims5 d = g.val(x).dims();
  Dims5 out_dims;
  switch (layout) {
    case MatrixLayout::Local:
      out_dims = Dims5{d.b * d.f * ws.windows_per_frame(d.h, d.w), 1, 1,
                       ws.patches_per_window(), d.c * ws.patch * ws.patch};
      break;
    case MatrixLayout::Global:
      out_dims = Dims5{d.b * d.f * ws.patches_per_window(), 1, 1,
                       ws.windows_per_frame(d.h, d.w), d.c * ws.patch * ws.patch};
      break;
    case MatrixLayout::Frame:
      out_dims = Dims5{d.b, 1, 1, d.f, d.c * d.h * d.w};
      break;
  }
  return gather(g, x, cached_index_map(layout, d, ws), out_dims);
}

template <typename T>
Id scatter(GraphT<T>& g, Id stack, MatrixLayout layout, Dims5 source_dims,
           WindowSpec ws) {
  return gather(g, stack, cached_inverse_index_map(layout, source_dims, ws),
                source_dims);
}

inline IndexMap pad_index_map(Dims5 d, int64_t pad_h, int64_t pad_w) {
  using Key = std::tuple<int64_t, int64_t, int64_t, int64_t, int64_t, int64_t,
                         int64_t>;
  static std::map<Key, IndexMap> cache;
  static std::mutex mu;
  Key key{d.b, d.c, d.f, d.h, d.w, pad_h, pad_w};
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const int64_t H = d.h + pad_h, W = d.w + pad_w;
  auto map = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(d.b * d.c * d.f * H * W));
  int64_t out = 0;
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t c = 0; c < d.c; ++c)
      for (int64_t f = 0; f < d.f; ++f)
        for (int64_t y = 0; y < H; ++y) {
          const int64_t sy = mirror_fold(y, d.h);
          for (int64_t x = 0; x < W; ++x)
            (*map)[out++] = (((b * d.c + c) * d.f + f) * d.h + sy) * d.w +
                            mirror_fold(x, d.w);
        }
  cache.emplace(key, map);
  return cache[key];
}

inline IndexMap crop_index_map(Dims5 padded, Dims5 orig) {
  using Key = std::tuple<int64_t, int64_t, int64_t, int64_t, int64_t, int64_t,
                         int64_t>;
  static std::map<Key, IndexMap> cache;
  static std::mutex mu;
  Key key{orig.b, orig.c, orig.f, orig.h, orig.w, padded.h, padded.w};
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto map = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(orig.numel()));
  int64_t out = 0;
  for (int64_t b = 0; b < orig.b; ++b)
    for (int64_t c = 0; c < orig.c; ++c)
      for (int64_t f = 0; f < orig.f; ++f)
        for (int64_t y = 0; y < orig.h; ++y)
          for (int64_t x = 0; x < orig.w; ++x)
            (*map)[out++] =
                (((b * orig.c + c) * orig.f + f) * padded.h + y) * padded.w + x;
  cache.emplace(key, map);
  return cache[key];
}

template <typename T>
std::pair<Id, PadRecord> pad_to_window(GraphT<T>& g, Id x, WindowSpec ws) {
  const Dims5 d = g.val(x).dims();
  PadRecord rec;
  rec.original = d;
  rec.h_hi = (ws.window - d.h % ws.window) % ws.window;
  rec.w_hi = (ws.window - d.w % ws.window) % ws.window;
  if (rec.h_hi == 0 && rec.w_hi == 0) return {x, rec};
  Dims5 pd = d;
  pd.h += rec.h_hi;
  pd.w += rec.w_hi;
  return {gather(g, x, pad_index_map(d, rec.h_hi, rec.w_hi), pd), rec};
}

/// Crops H and W back to the pre-pad extents; batch/channel/frame counts
/// come from the tensor itself (they may have changed since padding).
template <typename T>
Id crop_pad(GraphT<T>& g, Id x, const PadRecord& rec) {
  const Dims5 dx = g.val(x).dims();
  if (dx.h == rec.original.h && dx.w == rec.original.w) return x;
  Dims5 target = dx;
  target.h = rec.original.h;
  target.w = rec.original.w;
  return gather(g, x, crop_index_map(dx, target), target);
}

// ---------------------------------------------------------------------------
// matrix-stack attention primitives
// ---------------------------------------------------------------------------

/// logits[s] = (q[s] k[s]^T) * inv_scale on stacks (S,1,1,R,D).
template <typename T>
Id qk_scaled(GraphT<T>& g, Id q, Id k, T inv_scale) {
  const Dims5 dq = g.val(q).dims(), dk = g.val(k).dims();
  check_shape(dq.b == dk.b && dq.w == dk.w,
              "qk_scaled: stack count / vector dim mismatch");
  const int64_t S = dq.b, R = dq.h, R2 = dk.h, D = dq.w;
  TensorT<T> out(Dims5{S, 1, 1, R, R2});
  stack_gemm(S, R, R2, D, inv_scale, g.val(q).data(), Trans::No,
             g.val(k).data(), Trans::Yes, T(0), out.data());
  return g.emit(std::move(out), {q, k},
                [q, k, inv_scale, S, R, R2, D](GraphT<T>& gr, Id self) {
                  const TensorT<T>& dl = gr.grad(self);
                  if (gr.needs_grad(q)) {
                    TensorT<T> dq(gr.val(q).dims());
                    stack_gemm(S, R, D, R2, inv_scale, dl.data(), Trans::No,
                               gr.val(k).data(), Trans::No, T(0), dq.data());
                    gr.accum(q, dq);
                  }
                  if (gr.needs_grad(k)) {
                    TensorT<T> dk(gr.val(k).dims());
                    stack_gemm(S, R2, D, R, inv_scale, dl.data(), Trans::Yes,
                               gr.val(q).data(), Trans::No, T(0), dk.data());
                    gr.accum(k, dk);
                  }
                });
}

/// out[s] = a[s] v[s] on stacks a (S,1,1,R,R2), v (S,1,1,R2,D).
template <typename T>
Id attn_apply(GraphT<T>& g, Id a, Id v) {
  const Dims5 da = g.val(a).dims(), dv = g.val(v).dims();
  check_shape(da.b == dv.b && da.w == dv.h, "attn_apply: dims mismatch");
  const int64_t S = da.b, R = da.h, R2 = da.w, D = dv.w;
  TensorT<T> out(Dims5{S, 1, 1, R, D});
  stack_gemm(S, R, D, R2, T(1), g.val(a).data(), Trans::No, g.val(v).data(),
             Trans::No, T(0), out.data());
  return g.emit(std::move(out), {a, v},
                [a, v, S, R, R2, D](GraphT<T>& gr, Id self) {
                  const TensorT<T>& dy = gr.grad(self);
                  if (gr.needs_grad(a)) {
                    TensorT<T> da2(gr.val(a).dims());
                    stack_gemm(S, R, R2, D, T(1), dy.data(), Trans::No,
                               gr.val(v).data(), Trans::Yes, T(0), da2.data());
                    gr.accum(a, da2);
                  }
                  if (gr.needs_grad(v)) {
                    TensorT<T> dv2(gr.val(v).dims());
                    stack_gemm(S, R2, D, R, T(1), gr.val(a).data(), Trans::Yes,
                               dy.data(), Trans::No, T(0), dv2.data());
                    gr.accum(v, dv2);
                  }
                });
}

template <typename T>
Id softmax_rows(GraphT<T>& g, Id x) {
  TensorT<T> out = itx::softmax_rows(g.val(x));
  return g.emit(std::move(out), {x}, [x](GraphT<T>& gr, Id self) {
    gr.accum(x, softmax_rows_backward(gr.val(self), gr.grad(self)));
  });
}

/// logits (S,1,1,R,R2) + bias (1,1,1,R,R2) broadcast over the stack.
template <typename T>
Id broadcast_add_bias(GraphT<T>& g, Id logits, Id bias) {
  const Dims5 dl = g.val(logits).dims(), db = g.val(bias).dims();
  check_shape(db.h == dl.h && db.w == dl.w && db.b == 1,
              "broadcast_add_bias: bias shape mismatch");
  TensorT<T> out(dl);
  const TensorT<T>&lv = g.val(logits), &bv = g.val(bias);
  const int64_t S = dl.b, M = dl.h * dl.w;
#pragma omp parallel for schedule(static)
  for (int64_t s = 0; s < S; ++s)
    for (int64_t i = 0; i < M; ++i) out[s * M + i] = lv[s * M + i] + bv[i];
  return g.emit(std::move(out), {logits, bias},
                [logits, bias, S, M](GraphT<T>& gr, Id self) {
                  const TensorT<T>& dy = gr.grad(self);
                  gr.accum(logits, dy);
                  if (gr.needs_grad(bias)) {
                    TensorT<T> db2(gr.val(bias).dims());
                    for (int64_t s = 0; s < S; ++s)
                      for (int64_t i = 0; i < M; ++i) db2[i] += dy[s * M + i];
                    gr.accum(bias, db2);
                  }
                });
}

/// Materializes a relative bias matrix from a table of per-offset values:
/// B[i][j] = table[idx[i*R2+j]].
template <typename T>
Id bias_lookup(GraphT<T>& g, Id table,
               std::shared_ptr<const std::vector<int64_t>> idx, int64_t R,
               int64_t R2) {
  const TensorT<T>& tv = g.val(table);
  TensorT<T> out(Dims5{1, 1, 1, R, R2});
  check_shape(static_cast<int64_t>(idx->size()) == R * R2,
              "bias_lookup: index matrix size mismatch");
  for (int64_t i = 0; i < R * R2; ++i) {
    check_shape((*idx)[i] >= 0 && (*idx)[i] < tv.size(),
                "bias_lookup: table too small for offset range");
    out[i] = tv[(*idx)[i]];
  }
  return g.emit(std::move(out), {table}, [table, idx](GraphT<T>& gr, Id self) {
    const TensorT<T>& dy = gr.grad(self);
    TensorT<T> dt(gr.val(table).dims());
    for (int64_t i = 0; i < dy.size(); ++i) dt[(*idx)[i]] += dy[i];
    gr.accum(table, dt);
  });
}

/// Column slice of a stack: (S,1,1,R,D) -> (S,1,1,R,c1-c0).
template <typename T>
Id slice_cols(GraphT<T>& g, Id x, int64_t c0, int64_t c1) {
  const Dims5 d = g.val(x).dims();
  check_shape(0 <= c0 && c0 < c1 && c1 <= d.w, "slice_cols: bad range");
  const int64_t S = d.b * d.h, D = d.w, W = c1 - c0;
  TensorT<T> out(Dims5{d.b, 1, 1, d.h, W});
  const TensorT<T>& xv = g.val(x);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < S; ++r)
    std::memcpy(out.data() + r * W, xv.data() + r * D + c0,
                sizeof(T) * static_cast<size_t>(W));
  return g.emit(std::move(out), {x}, [x, c0, S, D, W](GraphT<T>& gr, Id self) {
    const TensorT<T>& dy = gr.grad(self);
    TensorT<T> dx(gr.val(x).dims());
    for (int64_t r = 0; r < S; ++r)
      for (int64_t j = 0; j < W; ++j) dx[r * D + c0 + j] = dy[r * W + j];
    gr.accum(x, dx);
  });
}

/// Inverse of head splitting: concatenate stacks along columns.
template <typename T>
Id concat_cols(GraphT<T>& g, const std::vector<Id>& parts) {
  check_shape(!parts.empty(), "concat_cols: no parts");
  const Dims5 d0 = g.val(parts[0]).dims();
  int64_t D = 0;
  for (Id p : parts) {
    const Dims5 dp = g.val(p).dims();
    check_shape(dp.b == d0.b && dp.h == d0.h, "concat_cols: shape mismatch");
    D += dp.w;
  }
  const int64_t S = d0.b * d0.h;
  TensorT<T> out(Dims5{d0.b, 1, 1, d0.h, D});
  std::vector<int64_t> offs;
  int64_t off = 0;
  for (Id p : parts) {
    const int64_t w = g.val(p).dims().w;
    const TensorT<T>& pv = g.val(p);
    for (int64_t r = 0; r < S; ++r)
      std::memcpy(out.data() + r * D + off, pv.data() + r * w,
                  sizeof(T) * static_cast<size_t>(w));
    offs.push_back(off);
    off += w;
  }
  std::vector<Id> parents = parts;
  return g.emit(std::move(out), std::move(parents),
                [parts, offs, S, D](GraphT<T>& gr, Id self) {
                  const TensorT<T>& dy = gr.grad(self);
                  for (size_t pi = 0; pi < parts.size(); ++pi) {
                    const int64_t w = gr.val(parts[pi]).dims().w;
                    TensorT<T> dp(gr.val(parts[pi]).dims());
                    for (int64_t r = 0; r < S; ++r)
                      std::memcpy(dp.data() + r * w,
                                  dy.data() + r * D + offs[pi],
                                  sizeof(T) * static_cast<size_t>(w));
                    gr.accum(parts[pi], dp);
                  }
                });
}

// ---------------------------------------------------------------------------
// losses / reductions
// ---------------------------------------------------------------------------

template <typename T>
Id sum_all(GraphT<T>& g, Id x) {
  TensorT<T> out(Dims5{1, 1, 1, 1, 1});
  out[0] = static_cast<T>(itx::sum_all(g.val(x)));
  return g.emit(std::move(out), {x}, [x](GraphT<T>& gr, Id self) {
    const T s = gr.grad(self)[0];
    TensorT<T> dx(gr.val(x).dims(), s);
    gr.accum(x, dx);
  });
}

/// Mean squared difference over all elements; target is a constant.
template <typename T>
Id mse_loss(GraphT<T>& g, Id pred, std::shared_ptr<const TensorT<T>> target) {
  const TensorT<T>& pv = g.val(pred);
  check_shape(pv.dims() == target->dims(), "mse_loss: dims mismatch " +
                                               pv.dims().str() + " vs " +
                                               target->dims().str());
  double acc = 0.0;
  for (int64_t i = 0; i < pv.size(); ++i) {
    const double e =
        static_cast<double>(pv[i]) - static_cast<double>((*target)[i]);
    acc += e * e;
  }
  TensorT<T> out(Dims5{1, 1, 1, 1, 1});
  const int64_t n = pv.size();
  out[0] = static_cast<T>(acc / static_cast<double>(n));
  return g.emit(std::move(out), {pred}, [pred, target, n](GraphT<T>& gr, Id self) {
    const T go = gr.grad(self)[0];
    const TensorT<T>& pv = gr.val(pred);
    TensorT<T> dx(pv.dims());
    const T k = go * T(2) / static_cast<T>(n);
    for (int64_t i = 0; i < pv.size(); ++i)
      dx[i] = k * (pv[i] - (*target)[i]);
    gr.accum(pred, dx);
  });
}

}  // namespace ad
}  // namespace itx
