#pragma once

#include <cmath>
#include <memory>
#include <mutex>
#include <vector>

#include "itx/ops.hpp"

namespace itx {

enum class AttnKind { Local, Global, Frame };

inline char attn_kind_char(AttnKind k) {
  switch (k) {
    case AttnKind::Local: return 'L';
    case AttnKind::Global: return 'G';
    case AttnKind::Frame: return 'F';
  }
  return '?';
}

/// Configuration shared by the three attention modules. The window spec is
/// ignored for frame attention; relative positional bias applies to the
/// patch grid (L) or window grid (G) and is never used for F.
struct AttentionConfig {
  AttnKind kind = AttnKind::Local;
  WindowSpec ws;
  int64_t heads = 1;
  int64_t channels = 1;
  bool use_bias = false;

  void validate() const {
    check_config(heads > 0 && channels > 0, "heads and channels must be positive");
    check_config(channels % heads == 0,
                 "heads must divide channels (head split is on channels)");
    if (kind != AttnKind::Frame) ws.validate();
    check_config(!(kind == AttnKind::Frame && use_bias),
                 "relative positional bias is not defined for frame attention");
  }
};

// ---------------------------------------------------------------------------
// Relative positional bias: a learnable value per distinct 2D offset on a
// grid (patch grid inside a window for L, window grid over the frame for G).
// ---------------------------------------------------------------------------

/// Number of distinct offsets on a gh x gw grid.
inline int64_t bias_table_size(int64_t gh, int64_t gw) {
  return (2 * gh - 1) * (2 * gw - 1);
}

/// Index matrix: entry (i, j) is the table slot for the offset between grid
/// positions i and j (raster order). B[i][j] == B[k][l] iff offsets match.
inline std::shared_ptr<const std::vector<int64_t>> bias_index_matrix(
    int64_t gh, int64_t gw) {
  using Key = std::pair<int64_t, int64_t>;
  static std::map<Key, std::shared_ptr<const std::vector<int64_t>>> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find({gh, gw});
  if (it != cache.end()) return it->second;
  const int64_t n = gh * gw;
  auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      const int64_t dy = i / gw - j / gw + gh - 1;
      const int64_t dx = i % gw - j % gw + gw - 1;
      (*idx)[i * n + j] = dy * (2 * gw - 1) + dx;
    }
  cache.emplace(Key{gh, gw}, idx);
  return cache[{gh, gw}];
}

/// Materializes B from a table for tests and inference-only callers.
/// For L the grid is the (w/p)^2 patch grid; for G the window grid, whose
/// extents must be passed as (gh, gw).
template <typename T>
TensorT<T> relative_position_bias(const TensorT<T>& table, int64_t gh,
                                  int64_t gw) {
  check_shape(table.size() == bias_table_size(gh, gw),
              "bias table size mismatch: expected " +
                  std::to_string(bias_table_size(gh, gw)) + ", got " +
                  std::to_string(table.size()));
  auto idx = bias_index_matrix(gh, gw);
  const int64_t n = gh * gw;
  TensorT<T> b(Dims5{1, 1, 1, n, n});
  for (int64_t i = 0; i < n * n; ++i) b[i] = table[(*idx)[i]];
  return b;
}

// ---------------------------------------------------------------------------
// scaled attention on matrix stacks (plain, non-tape): returns the output
// stack and the attention coefficients A. Every row of A sums to 1.
// ---------------------------------------------------------------------------

template <typename T>
struct ScaledAttentionResult {
  TensorT<T> out;  // (S,1,1,R,D)
  TensorT<T> a;    // (S,1,1,R,R)
};

template <typename T>
ScaledAttentionResult<T> scaled_attention(const TensorT<T>& q,
                                          const TensorT<T>& k,
                                          const TensorT<T>& v,
                                          const TensorT<T>* bias, T scale) {
  check_config(scale > T(0), "scaled_attention: scale must be positive");
  const Dims5 dq = q.dims(), dk = k.dims(), dv = v.dims();
  check_shape(dq.w == dk.w && dq.b == dk.b && dk.h == dv.h && dq.b == dv.b,
              "scaled_attention: matrix dims disagree");
  const int64_t S = dq.b, R = dq.h, R2 = dk.h, D = dq.w;
  TensorT<T> logits(Dims5{S, 1, 1, R, R2});
  stack_gemm(S, R, R2, D, T(1) / scale, q.data(), Trans::No, k.data(),
             Trans::Yes, T(0), logits.data());
  if (bias) {
    check_shape(bias->dims().h == R && bias->dims().w == R2,
                "scaled_attention: bias shape mismatch");
    for (int64_t s = 0; s < S; ++s)
      for (int64_t i = 0; i < R * R2; ++i)
        logits[s * R * R2 + i] += (*bias)[i];
  }
  ScaledAttentionResult<T> res;
  res.a = softmax_rows(logits);
  res.out = TensorT<T>(Dims5{S, 1, 1, R, dv.w});
  stack_gemm(S, R, dv.w, R2, T(1), res.a.data(), Trans::No, v.data(),
             Trans::No, T(0), res.out.data());
  return res;
}

/// Contiguous column-block head split: (S,1,1,R,D) -> h stacks (S,1,1,R,D/h).
template <typename T>
std::vector<TensorT<T>> split_heads(const TensorT<T>& stack, int64_t heads) {
  const Dims5 d = stack.dims();
  check_shape(d.w % heads == 0, "split_heads: heads must divide vector dim");
  const int64_t D = d.w, W = D / heads, rows = d.b * d.h;
  std::vector<TensorT<T>> out;
  for (int64_t h = 0; h < heads; ++h) {
    TensorT<T> part(Dims5{d.b, 1, 1, d.h, W});
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(part.data() + r * W, stack.data() + r * D + h * W,
                  sizeof(T) * static_cast<size_t>(W));
    out.push_back(std::move(part));
  }
  return out;
}

template <typename T>
TensorT<T> merge_heads(const std::vector<TensorT<T>>& parts) {
  check_shape(!parts.empty(), "merge_heads: empty input");
  const Dims5 d0 = parts[0].dims();
  int64_t D = 0;
  for (const auto& p : parts) D += p.dims().w;
  TensorT<T> out(Dims5{d0.b, 1, 1, d0.h, D});
  const int64_t rows = d0.b * d0.h;
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.dims().w;
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(out.data() + r * D + off, p.data() + r * w,
                  sizeof(T) * static_cast<size_t>(w));
    off += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention module parameters and the tape-level forward shared by the
// model and the plain wrappers.
// ---------------------------------------------------------------------------

/// Learnable state of one attention module: three QKV conv sets plus the
/// optional relative-bias table.
template <typename T>
struct AttentionParamsT {
  TensorT<T> qw, qb, kw, kb, vw, vb;
  TensorT<T> bias_table;  // empty when bias disabled

  template <typename U>
  AttentionParamsT<U> cast() const {
    AttentionParamsT<U> o;
    o.qw = qw.template cast<U>();
    o.qb = qb.template cast<U>();
    o.kw = kw.template cast<U>();
    o.kb = kb.template cast<U>();
    o.vw = vw.template cast<U>();
    o.vb = vb.template cast<U>();
    if (bias_table.size() > 0) o.bias_table = bias_table.template cast<U>();
    return o;
  }
};

using AttentionParams = AttentionParamsT<float>;

/// Bias-table length required by a config at a given (padded) input size.
inline int64_t attention_bias_size(const AttentionConfig& cfg, int64_t h,
                                   int64_t w) {
  if (!cfg.use_bias || cfg.kind == AttnKind::Frame) return 0;
  if (cfg.kind == AttnKind::Local) {
    const int64_t gp = cfg.ws.window / cfg.ws.patch;
    return bias_table_size(gp, gp);
  }
  return bias_table_size(h / cfg.ws.window, w / cfg.ws.window);
}

template <typename T>
AttentionParamsT<T> init_attention_params(const AttentionConfig& cfg,
                                          int64_t h, int64_t w,
                                          std::mt19937_64& rng) {
  cfg.validate();
  const int64_t C = cfg.channels;
  const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(C * 9)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  AttentionParamsT<T> p;
  auto make_w = [&] {
    TensorT<T> t(Dims5{C, C, 1, 3, 3});
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
    return t;
  };
  p.qw = make_w();
  p.kw = make_w();
  p.vw = make_w();
  p.qb = TensorT<T>(Dims5{1, C, 1, 1, 1});
  p.kb = TensorT<T>(Dims5{1, C, 1, 1, 1});
  p.vb = TensorT<T>(Dims5{1, C, 1, 1, 1});
  const int64_t bsz = attention_bias_size(cfg, h, w);
  if (bsz > 0) p.bias_table = TensorT<T>(Dims5{1, 1, 1, 1, bsz});
  return p;
}

template <typename T>
struct AttentionParamIds {
  ad::Id qw = -1, qb = -1, kw = -1, kb = -1, vw = -1, vb = -1, bias = -1;
};

/// Q/K/V projection: three independent 3x3 convolutions, C -> C.
template <typename T>
std::array<ad::Id, 3> qkv_project(ad::GraphT<T>& g, ad::Id x,
                                  const AttentionParamIds<T>& p) {
  return {ad::conv2d(g, x, p.qw, p.qb), ad::conv2d(g, x, p.kw, p.kb),
          ad::conv2d(g, x, p.vw, p.vb)};
}

/// The shared attention pipeline: QKV convs -> pad -> assemble -> per-head
/// scaled attention (+bias for L/G) -> merge -> scatter -> crop. Output dims
/// equal input dims for every kind.
template <typename T>
ad::Id attention_forward(ad::GraphT<T>& g, ad::Id x,
                         const AttentionConfig& cfg,
                         const AttentionParamIds<T>& p) {
  cfg.validate();
  const Dims5 din = g.val(x).dims();
  check_shape(din.c == cfg.channels,
              "attention: input channels " + std::to_string(din.c) +
                  " do not match config channels " +
                  std::to_string(cfg.channels));
  auto [q, k, v] = qkv_project(g, x, p);

  MatrixLayout layout = MatrixLayout::Frame;
  PadRecord rec;
  rec.original = din;
  if (cfg.kind != AttnKind::Frame) {
    layout = cfg.kind == AttnKind::Local ? MatrixLayout::Local
                                         : MatrixLayout::Global;
    auto [qp, r] = ad::pad_to_window(g, q, cfg.ws);
    q = qp;
    rec = r;
    k = ad::pad_to_window(g, k, cfg.ws).first;
    v = ad::pad_to_window(g, v, cfg.ws).first;
  }
  const Dims5 dp = g.val(q).dims();

  ad::Id qs = ad::assemble(g, q, layout, cfg.ws);
  ad::Id ks = ad::assemble(g, k, layout, cfg.ws);
  ad::Id vs = ad::assemble(g, v, layout, cfg.ws);

  const int64_t D = g.val(qs).dims().w;
  const int64_t R = g.val(qs).dims().h;
  const int64_t dh = D / cfg.heads;
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  ad::Id bias_mat = -1;
  if (cfg.use_bias && p.bias >= 0) {
    int64_t gh, gw;
    if (cfg.kind == AttnKind::Local) {
      gh = gw = cfg.ws.window / cfg.ws.patch;
    } else {
      gh = dp.h / cfg.ws.window;
      gw = dp.w / cfg.ws.window;
    }
    check_shape(gh * gw == R, "attention: bias grid does not match rows");
    bias_mat = ad::bias_lookup(g, p.bias, bias_index_matrix(gh, gw), R, R);
  }

  std::vector<ad::Id> head_outs;
  for (int64_t h = 0; h < cfg.heads; ++h) {
    ad::Id qh = cfg.heads == 1 ? qs : ad::slice_cols(g, qs, h * dh, (h + 1) * dh);
    ad::Id kh = cfg.heads == 1 ? ks : ad::slice_cols(g, ks, h * dh, (h + 1) * dh);
    ad::Id vh = cfg.heads == 1 ? vs : ad::slice_cols(g, vs, h * dh, (h + 1) * dh);
    ad::Id logits = ad::qk_scaled(g, qh, kh, inv_scale);
    if (bias_mat >= 0) logits = ad::broadcast_add_bias(g, logits, bias_mat);
    ad::Id a = ad::softmax_rows(g, logits);
    head_outs.push_back(ad::attn_apply(g, a, vh));
  }
  ad::Id merged =
      cfg.heads == 1 ? head_outs[0] : ad::concat_cols(g, head_outs);
  ad::Id scattered = ad::scatter(g, merged, layout, dp, cfg.ws);
  return ad::crop_pad(g, scattered, rec);
}

/// Plain single-tensor wrappers (inference path, no gradients recorded).
template <typename T>
TensorT<T> attention_apply(const TensorT<T>& x, const AttentionConfig& cfg,
                           const AttentionParamsT<T>& params) {
  ad::GraphT<T> g(false);
  AttentionParamIds<T> ids;
  ids.qw = g.input(params.qw);
  ids.qb = g.input(params.qb);
  ids.kw = g.input(params.kw);
  ids.kb = g.input(params.kb);
  ids.vw = g.input(params.vw);
  ids.vb = g.input(params.vb);
  if (cfg.use_bias && params.bias_table.size() > 0)
    ids.bias = g.input(params.bias_table);
  ad::Id out = attention_forward(g, g.input(x), cfg, ids);
  return g.val(out);
}

template <typename T>
TensorT<T> local_attention(const TensorT<T>& x, const AttentionConfig& cfg,
                           const AttentionParamsT<T>& params) {
  check_config(cfg.kind == AttnKind::Local, "local_attention: wrong kind");
  return attention_apply(x, cfg, params);
}

template <typename T>
TensorT<T> global_attention(const TensorT<T>& x, const AttentionConfig& cfg,
                            const AttentionParamsT<T>& params) {
  check_config(cfg.kind == AttnKind::Global, "global_attention: wrong kind");
  return attention_apply(x, cfg, params);
}

template <typename T>
TensorT<T> frame_attention(const TensorT<T>& x, const AttentionConfig& cfg,
                           const AttentionParamsT<T>& params) {
  check_config(cfg.kind == AttnKind::Frame, "frame_attention: wrong kind");
  return attention_apply(x, cfg, params);
}

}  // namespace itx
