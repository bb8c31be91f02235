#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "itx/tensor.hpp"
#include "itx/window.hpp"

// Numeric kernels on 5D tensors and matrix stacks. The OpenMP versions in
// itx:: are the production path; itx::ref:: holds naive serial versions used
// by tests and the kernel benchmark. Every parallel kernel computes each
// output element on exactly one thread with a fixed accumulation order, so
// results are bit-identical across thread counts.

namespace itx {

// ---------------------------------------------------------------------------
// conv2d: per-frame 2D convolution, 3x3 kernel, stride 1, zero padding 1.
// weights (C_out, C_in, 1, 3, 3), bias (1, C_out, 1, 1, 1).
// ---------------------------------------------------------------------------

template <typename T>
void conv2d_shape_check(const Dims5& x, const Dims5& w, const Dims5& b) {
  check_shape(w.f == 1 && w.h == 3 && w.w == 3,
              "conv2d expects 3x3 kernels, got " + w.str());
  check_shape(x.c == w.c, "conv2d channel mismatch: input has " +
                              std::to_string(x.c) + " channels, weights expect " +
                              std::to_string(w.c));
  check_shape(b.c == w.b && b.numel() == w.b,
              "conv2d bias must have one entry per output channel");
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>& bias) {
  conv2d_shape_check<T>(x.dims(), w.dims(), bias.dims());
  const Dims5 d = x.dims();
  const int64_t co_n = w.dims().b, ci_n = d.c, H = d.h, W = d.w;
  TensorT<T> y(Dims5{d.b, co_n, d.f, H, W});
  const T* wp = w.data();
#pragma omp parallel for collapse(3) schedule(static)
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t co = 0; co < co_n; ++co)
      for (int64_t f = 0; f < d.f; ++f) {
        std::vector<T> acc(static_cast<size_t>(W));
        const T bv = bias[co];
        for (int64_t yy = 0; yy < H; ++yy) {
          std::fill(acc.begin(), acc.end(), bv);
          for (int64_t ci = 0; ci < ci_n; ++ci) {
            const int64_t ky0 = yy > 0 ? -1 : 0, ky1 = yy < H - 1 ? 1 : 0;
            for (int64_t ky = ky0; ky <= ky1; ++ky) {
              const T* __restrict row = x.plane(b, ci, f) + (yy + ky) * W;
              const T* __restrict wk = wp + ((co * ci_n + ci) * 3 + ky + 1) * 3;
              const T w0 = wk[0], w1 = wk[1], w2 = wk[2];
              T* __restrict a = acc.data();
              a[0] += w1 * row[0] + (W > 1 ? w2 * row[1] : T(0));
              for (int64_t xx = 1; xx < W - 1; ++xx)
                a[xx] += w0 * row[xx - 1] + w1 * row[xx] + w2 * row[xx + 1];
              if (W > 1) a[W - 1] += w0 * row[W - 2] + w1 * row[W - 1];
            }
          }
          std::memcpy(y.plane(b, co, f) + yy * W, acc.data(),
                      sizeof(T) * static_cast<size_t>(W));
        }
      }
  return y;
}

template <typename T>
struct Conv2dGrads {
  TensorT<T> dx, dw, db;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const TensorT<T>& x, const TensorT<T>& w,
                               const TensorT<T>& dy) {
  const Dims5 d = x.dims();
  const int64_t co_n = w.dims().b, ci_n = d.c, H = d.h, W = d.w;
  Conv2dGrads<T> g{TensorT<T>(d), TensorT<T>(w.dims()),
                   TensorT<T>(Dims5{1, co_n, 1, 1, 1})};

  // db[co] = sum over (b, f, y, x) of dy
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < co_n; ++co) {
    double s = 0.0;
    for (int64_t b = 0; b < d.b; ++b)
      for (int64_t f = 0; f < d.f; ++f) {
        const T* p = dy.plane(b, co, f);
        for (int64_t i = 0; i < H * W; ++i) s += static_cast<double>(p[i]);
      }
    g.db[co] = static_cast<T>(s);
  }

  // dw[co][ci][ky][kx] = sum over valid (y, x) of dy[co](y,x) * x[ci](y+ky,x+kx)
  // accumulated into per-x lanes first so the hot loop is independent FMAs
  // rather than a serial reduction
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t co = 0; co < co_n; ++co)
    for (int64_t ci = 0; ci < ci_n; ++ci) {
      std::vector<T> lanes(static_cast<size_t>(9 * W), T(0));
      for (int64_t b = 0; b < d.b; ++b)
        for (int64_t f = 0; f < d.f; ++f) {
          const T* dyp = dy.plane(b, co, f);
          const T* xp = x.plane(b, ci, f);
          for (int64_t yy = 0; yy < H; ++yy) {
            const T* __restrict a = dyp + yy * W;
            const int64_t ky0 = yy > 0 ? -1 : 0, ky1 = yy < H - 1 ? 1 : 0;
            for (int64_t ky = ky0; ky <= ky1; ++ky) {
              const T* __restrict bb = xp + (yy + ky) * W;
              T* __restrict lane = lanes.data() + (ky + 1) * 3 * W;
              // kx = -1, 0, +1 with boundary columns excluded
              for (int64_t xx = 1; xx < W; ++xx) lane[xx] += a[xx] * bb[xx - 1];
              for (int64_t xx = 0; xx < W; ++xx)
                lane[W + xx] += a[xx] * bb[xx];
              for (int64_t xx = 0; xx < W - 1; ++xx)
                lane[2 * W + xx] += a[xx] * bb[xx + 1];
            }
          }
        }
      T* wg = g.dw.data() + (co * ci_n + ci) * 9;
      for (int64_t tap = 0; tap < 9; ++tap) {
        double s = 0.0;
        for (int64_t xx = 0; xx < W; ++xx)
          s += static_cast<double>(lanes[tap * W + xx]);
        wg[tap] = static_cast<T>(s);
      }
    }

  // dx = correlation of dy with the flipped kernel, channels transposed
#pragma omp parallel for collapse(3) schedule(static)
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t ci = 0; ci < ci_n; ++ci)
      for (int64_t f = 0; f < d.f; ++f) {
        std::vector<T> acc(static_cast<size_t>(W));
        for (int64_t yy = 0; yy < H; ++yy) {
          std::fill(acc.begin(), acc.end(), T(0));
          for (int64_t co = 0; co < co_n; ++co) {
            const int64_t ky0 = yy > 0 ? -1 : 0, ky1 = yy < H - 1 ? 1 : 0;
            for (int64_t ky = ky0; ky <= ky1; ++ky) {
              const T* __restrict row = dy.plane(b, co, f) + (yy + ky) * W;
              // flipped taps: contribution of dy(y+ky, x+kx) uses w[1-ky][1-kx]
              const T* __restrict wk = w.data() + ((co * ci_n + ci) * 3 + (1 - ky)) * 3;
              const T w0 = wk[2], w1 = wk[1], w2 = wk[0];
              T* __restrict a = acc.data();
              a[0] += w1 * row[0] + (W > 1 ? w2 * row[1] : T(0));
              for (int64_t xx = 1; xx < W - 1; ++xx)
                a[xx] += w0 * row[xx - 1] + w1 * row[xx] + w2 * row[xx + 1];
              if (W > 1) a[W - 1] += w0 * row[W - 2] + w1 * row[W - 1];
            }
          }
          std::memcpy(g.dx.plane(b, ci, f) + yy * W, acc.data(),
                      sizeof(T) * static_cast<size_t>(W));
        }
      }
  return g;
}

// ---------------------------------------------------------------------------
// layer_norm over (C, H, W) per (batch, frame); per-channel affine.
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormAux {
  std::vector<double> mean, invstd;  // one entry per (b, f) group
};

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain,
                      const TensorT<T>& offset, T eps,
                      LayerNormAux<T>* aux = nullptr) {
  const Dims5 d = x.dims();
  check_shape(gain.dims().c == d.c && offset.dims().c == d.c,
              "layer_norm affine parameters must be per-channel");
  check_config(eps > T(0), "layer_norm eps must be positive");
  TensorT<T> y(d);
  const int64_t groups = d.b * d.f, plane = d.h * d.w;
  if (aux) {
    aux->mean.assign(groups, 0.0);
    aux->invstd.assign(groups, 0.0);
  }
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t f = 0; f < d.f; ++f) {
      double s = 0.0, s2 = 0.0;
      for (int64_t c = 0; c < d.c; ++c) {
        const T* p = x.plane(b, c, f);
        for (int64_t i = 0; i < plane; ++i) {
          double v = static_cast<double>(p[i]);
          s += v;
          s2 += v * v;
        }
      }
      const double n = static_cast<double>(d.c * plane);
      const double mean = s / n;
      const double var = std::max(0.0, s2 / n - mean * mean);
      const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
      if (aux) {
        aux->mean[b * d.f + f] = mean;
        aux->invstd[b * d.f + f] = inv;
      }
      for (int64_t c = 0; c < d.c; ++c) {
        const T* p = x.plane(b, c, f);
        T* q = y.plane(b, c, f);
        const T gc = gain[c], oc = offset[c];
        for (int64_t i = 0; i < plane; ++i)
          q[i] = static_cast<T>((static_cast<double>(p[i]) - mean) * inv) * gc + oc;
      }
    }
  return y;
}

template <typename T>
struct LayerNormGrads {
  TensorT<T> dx, dgain, doffset;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const TensorT<T>& x,
                                      const TensorT<T>& gain,
                                      const LayerNormAux<T>& aux,
                                      const TensorT<T>& dy) {
  const Dims5 d = x.dims();
  LayerNormGrads<T> g{TensorT<T>(d), TensorT<T>(gain.dims()),
                      TensorT<T>(gain.dims())};
  const int64_t plane = d.h * d.w;
  const double n = static_cast<double>(d.c * plane);
  // dgain / doffset accumulate across groups; keep that reduction serial.
  std::vector<double> dgain(d.c, 0.0), doffset(d.c, 0.0);
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t f = 0; f < d.f; ++f) {
      const double mean = aux.mean[b * d.f + f], inv = aux.invstd[b * d.f + f];
      double sum_g = 0.0, sum_gx = 0.0;
      for (int64_t c = 0; c < d.c; ++c) {
        const T* xp = x.plane(b, c, f);
        const T* dp = dy.plane(b, c, f);
        const double gc = static_cast<double>(gain[c]);
        double dg = 0.0, doff = 0.0;
        for (int64_t i = 0; i < plane; ++i) {
          const double xhat = (static_cast<double>(xp[i]) - mean) * inv;
          const double gd = gc * static_cast<double>(dp[i]);
          sum_g += gd;
          sum_gx += gd * xhat;
          dg += static_cast<double>(dp[i]) * xhat;
          doff += static_cast<double>(dp[i]);
        }
        dgain[c] += dg;
        doffset[c] += doff;
      }
      const double mg = sum_g / n, mgx = sum_gx / n;
      for (int64_t c = 0; c < d.c; ++c) {
        const T* xp = x.plane(b, c, f);
        const T* dp = dy.plane(b, c, f);
        T* out = g.dx.plane(b, c, f);
        const double gc = static_cast<double>(gain[c]);
        for (int64_t i = 0; i < plane; ++i) {
          const double xhat = (static_cast<double>(xp[i]) - mean) * inv;
          const double gd = gc * static_cast<double>(dp[i]);
          out[i] = static_cast<T>(inv * (gd - mg - xhat * mgx));
        }
      }
    }
  for (int64_t c = 0; c < d.c; ++c) {
    g.dgain[c] = static_cast<T>(dgain[c]);
    g.doffset[c] = static_cast<T>(doffset[c]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// PReLU with per-channel slope.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> prelu(const TensorT<T>& x, const TensorT<T>& slope) {
  const Dims5 d = x.dims();
  check_shape(slope.dims().c == d.c, "prelu slope must be per-channel");
  TensorT<T> y(d);
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t c = 0; c < d.c; ++c) {
      const T s = slope[c];
      for (int64_t f = 0; f < d.f; ++f) {
        const T* p = x.plane(b, c, f);
        T* q = y.plane(b, c, f);
        for (int64_t i = 0; i < d.h * d.w; ++i)
          q[i] = p[i] >= T(0) ? p[i] : s * p[i];
      }
    }
  return y;
}

template <typename T>
struct PreluGrads {
  TensorT<T> dx, dslope;
};

template <typename T>
PreluGrads<T> prelu_backward(const TensorT<T>& x, const TensorT<T>& slope,
                             const TensorT<T>& dy) {
  const Dims5 d = x.dims();
  PreluGrads<T> g{TensorT<T>(d), TensorT<T>(slope.dims())};
  std::vector<double> ds(d.c, 0.0);
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t c = 0; c < d.c; ++c) {
      const T s = slope[c];
      double acc = 0.0;
      for (int64_t f = 0; f < d.f; ++f) {
        const T* xp = x.plane(b, c, f);
        const T* dp = dy.plane(b, c, f);
        T* out = g.dx.plane(b, c, f);
        for (int64_t i = 0; i < d.h * d.w; ++i) {
          if (xp[i] >= T(0)) {
            out[i] = dp[i];
          } else {
            out[i] = s * dp[i];
            acc += static_cast<double>(dp[i]) * static_cast<double>(xp[i]);
          }
        }
      }
      ds[c] += acc;
    }
  for (int64_t c = 0; c < d.c; ++c) g.dslope[c] = static_cast<T>(ds[c]);
  return g;
}

// ---------------------------------------------------------------------------
// Patch-merge rearrangement: 2x2 neighborhoods into channels, C -> 4C,
// H,W -> H/2,W/2. Quadrant-major output channel order: out c' = k*C + c
// with k = dy*2 + dx. A following conv projects 4C -> 2C.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> patch_merge_rearrange(const TensorT<T>& x) {
  const Dims5 d = x.dims();
  check_shape(d.h % 2 == 0 && d.w % 2 == 0,
              "patch_merge requires even H and W, got " + d.str());
  TensorT<T> y(Dims5{d.b, 4 * d.c, d.f, d.h / 2, d.w / 2});
  const int64_t oh = d.h / 2, ow = d.w / 2;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t c = 0; c < d.c; ++c)
      for (int64_t f = 0; f < d.f; ++f) {
        const T* p = x.plane(b, c, f);
        for (int64_t k = 0; k < 4; ++k) {
          const int64_t dy = k / 2, dx = k % 2;
          T* q = y.plane(b, k * d.c + c, f);
          for (int64_t yy = 0; yy < oh; ++yy)
            for (int64_t xx = 0; xx < ow; ++xx)
              q[yy * ow + xx] = p[(2 * yy + dy) * d.w + 2 * xx + dx];
        }
      }
  return y;
}

template <typename T>
TensorT<T> patch_merge_rearrange_backward(const TensorT<T>& dy, Dims5 xdims) {
  TensorT<T> dx(xdims);
  const int64_t oh = xdims.h / 2, ow = xdims.w / 2;
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < xdims.b; ++b)
    for (int64_t c = 0; c < xdims.c; ++c)
      for (int64_t f = 0; f < xdims.f; ++f) {
        T* q = dx.plane(b, c, f);
        for (int64_t k = 0; k < 4; ++k) {
          const int64_t ddy = k / 2, ddx = k % 2;
          const T* p = dy.plane(b, k * xdims.c + c, f);
          for (int64_t yy = 0; yy < oh; ++yy)
            for (int64_t xx = 0; xx < ow; ++xx)
              q[(2 * yy + ddy) * xdims.w + 2 * xx + ddx] = p[yy * ow + xx];
        }
      }
  return dx;
}

// ---------------------------------------------------------------------------
// Bilinear 2x upsampling per frame (half-pixel centers, clamped edges).
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> upsample2x_bilinear(const TensorT<T>& x) {
  const Dims5 d = x.dims();
  TensorT<T> y(Dims5{d.b, d.c, d.f, 2 * d.h, 2 * d.w});
  const int64_t OH = 2 * d.h, OW = 2 * d.w;
  // precompute 1D sample positions / weights; same for rows and cols
  auto make_axis = [](int64_t n_out, int64_t n_in) {
    std::vector<std::pair<int64_t, T>> ax(n_out);  // (i0, weight of i0+1)
    for (int64_t o = 0; o < n_out; ++o) {
      double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
      double fl = std::floor(src);
      int64_t i0 = static_cast<int64_t>(fl);
      T t = static_cast<T>(src - fl);
      if (i0 < 0) {
        i0 = 0;
        t = T(0);
      }
      if (i0 >= n_in - 1) {
        i0 = n_in > 1 ? n_in - 2 : 0;
        t = n_in > 1 ? T(1) : T(0);
      }
      ax[o] = {i0, t};
    }
    return ax;
  };
  const auto ay = make_axis(OH, d.h), axx = make_axis(OW, d.w);
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t c = 0; c < d.c; ++c)
      for (int64_t f = 0; f < d.f; ++f) {
        const T* p = x.plane(b, c, f);
        T* q = y.plane(b, c, f);
        for (int64_t oy = 0; oy < OH; ++oy) {
          const auto [y0, ty] = ay[oy];
          const int64_t y1 = std::min(y0 + 1, d.h - 1);
          for (int64_t ox = 0; ox < OW; ++ox) {
            const auto [x0, tx] = axx[ox];
            const int64_t x1 = std::min(x0 + 1, d.w - 1);
            const T v00 = p[y0 * d.w + x0], v01 = p[y0 * d.w + x1];
            const T v10 = p[y1 * d.w + x0], v11 = p[y1 * d.w + x1];
            q[oy * OW + ox] = (T(1) - ty) * ((T(1) - tx) * v00 + tx * v01) +
                              ty * ((T(1) - tx) * v10 + tx * v11);
          }
        }
      }
  return y;
}

template <typename T>
TensorT<T> upsample2x_bilinear_backward(const TensorT<T>& dy, Dims5 xdims) {
  TensorT<T> dx(xdims);
  const int64_t OH = 2 * xdims.h, OW = 2 * xdims.w;
  auto pos = [](int64_t o, int64_t n_in) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    double fl = std::floor(src);
    int64_t i0 = static_cast<int64_t>(fl);
    double t = src - fl;
    if (i0 < 0) {
      i0 = 0;
      t = 0.0;
    }
    if (i0 >= n_in - 1) {
      i0 = n_in > 1 ? n_in - 2 : 0;
      t = n_in > 1 ? 1.0 : 0.0;
    }
    return std::pair<int64_t, double>{i0, t};
  };
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < xdims.b; ++b)
    for (int64_t c = 0; c < xdims.c; ++c)
      for (int64_t f = 0; f < xdims.f; ++f) {
        const T* p = dy.plane(b, c, f);
        T* q = dx.plane(b, c, f);
        for (int64_t oy = 0; oy < OH; ++oy) {
          const auto [y0, ty] = pos(oy, xdims.h);
          const int64_t y1 = std::min(y0 + 1, xdims.h - 1);
          for (int64_t ox = 0; ox < OW; ++ox) {
            const auto [x0, tx] = pos(ox, xdims.w);
            const int64_t x1 = std::min(x0 + 1, xdims.w - 1);
            const double g = static_cast<double>(p[oy * OW + ox]);
            q[y0 * xdims.w + x0] += static_cast<T>((1 - ty) * (1 - tx) * g);
            q[y0 * xdims.w + x1] += static_cast<T>((1 - ty) * tx * g);
            q[y1 * xdims.w + x0] += static_cast<T>(ty * (1 - tx) * g);
            q[y1 * xdims.w + x1] += static_cast<T>(ty * tx * g);
          }
        }
      }
  return dx;
}

/// Patch merging: 2x2 neighborhoods into channels followed by a conv that
/// sets the output channel count (C -> 2C in the backbone).
template <typename T>
TensorT<T> patch_merge_down(const TensorT<T>& x, const TensorT<T>& proj_w,
                            const TensorT<T>& proj_b) {
  return conv2d(patch_merge_rearrange(x), proj_w, proj_b);
}

/// Bilinear 2x upsampling followed by a channel-adjusting conv.
template <typename T>
TensorT<T> upsample_linear(const TensorT<T>& x, const TensorT<T>& proj_w,
                           const TensorT<T>& proj_b) {
  return conv2d(upsample2x_bilinear(x), proj_w, proj_b);
}

// ---------------------------------------------------------------------------
// Matrix-stack primitives for attention. A stack tensor has dims
// (S, 1, 1, rows, cols); every matrix in the stack shares its shape.
// ---------------------------------------------------------------------------

enum class Trans { No, Yes };

/// C[s] (MxN) = alpha * op(A[s]) * op(B[s]) + beta * C[s]
template <typename T>
void stack_gemm(int64_t S, int64_t M, int64_t N, int64_t K, T alpha,
                const T* A, Trans ta, const T* B, Trans tb, T beta, T* C) {
  const int64_t sa = M * K, sb = K * N, sc = M * N;
#pragma omp parallel for schedule(static)
  for (int64_t s = 0; s < S; ++s) {
    const T* a = A + s * sa;
    const T* b = B + s * sb;
    T* c = C + s * sc;
    for (int64_t i = 0; i < sc; ++i) c[i] = beta == T(0) ? T(0) : beta * c[i];
    if (ta == Trans::No && tb == Trans::No) {
      for (int64_t i = 0; i < M; ++i) {
        T* crow = c + i * N;
        for (int64_t k = 0; k < K; ++k) {
          const T av = alpha * a[i * K + k];
          const T* brow = b + k * N;
          for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
      }
    } else if (ta == Trans::No && tb == Trans::Yes) {
      // B stored NxK; rows of both operands are contiguous
      for (int64_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        T* crow = c + i * N;
        for (int64_t j = 0; j < N; ++j) {
          const T* brow = b + j * K;
          T dot = T(0);
          for (int64_t k = 0; k < K; ++k) dot += arow[k] * brow[k];
          crow[j] += alpha * dot;
        }
      }
    } else if (ta == Trans::Yes && tb == Trans::No) {
      // A stored KxM
      for (int64_t k = 0; k < K; ++k) {
        const T* arow = a + k * M;
        const T* brow = b + k * N;
        for (int64_t i = 0; i < M; ++i) {
          const T av = alpha * arow[i];
          T* crow = c + i * N;
          for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
      }
    } else {
      for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) {
          T dot = T(0);
          for (int64_t k = 0; k < K; ++k) dot += a[k * M + i] * b[j * K + k];
          c[i * N + j] += alpha * dot;
        }
    }
  }
}

/// Row softmax with max subtraction over the last axis of a stack tensor.
/// Throws on non-finite logits (signals upstream blow-up).
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
  const Dims5 d = x.dims();
  const int64_t nrows = d.numel() / d.w, R = d.w;
  TensorT<T> y(d);
  bool bad = false;  // exceptions must not unwind out of the parallel region
#pragma omp parallel for schedule(static) reduction(|| : bad)
  for (int64_t r = 0; r < nrows; ++r) {
    const T* p = x.data() + r * R;
    T* q = y.data() + r * R;
    T m = p[0];
    for (int64_t j = 1; j < R; ++j) m = std::max(m, p[j]);
    if (!std::isfinite(static_cast<double>(m))) {
      bad = true;
      continue;
    }
    double sum = 0.0;
    for (int64_t j = 0; j < R; ++j) {
      const double e = std::exp(static_cast<double>(p[j] - m));
      q[j] = static_cast<T>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < R; ++j) q[j] = static_cast<T>(q[j] * inv);
  }
  if (bad)
    throw std::runtime_error("softmax_rows: non-finite attention logits");
  return y;
}

/// dx = a .* (dy - rowsum(dy .* a)), where a = softmax(x).
template <typename T>
TensorT<T> softmax_rows_backward(const TensorT<T>& a, const TensorT<T>& dy) {
  const Dims5 d = a.dims();
  const int64_t nrows = d.numel() / d.w, R = d.w;
  TensorT<T> dx(d);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < nrows; ++r) {
    const T* ap = a.data() + r * R;
    const T* dp = dy.data() + r * R;
    T* q = dx.data() + r * R;
    double dot = 0.0;
    for (int64_t j = 0; j < R; ++j)
      dot += static_cast<double>(dp[j]) * static_cast<double>(ap[j]);
    for (int64_t j = 0; j < R; ++j)
      q[j] = static_cast<T>(static_cast<double>(ap[j]) *
                            (static_cast<double>(dp[j]) - dot));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Elementwise helpers.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_shape(a.dims() == b.dims(), "add: dims mismatch " + a.dims().str() +
                                        " vs " + b.dims().str());
  TensorT<T> y(a.dims());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  TensorT<T> y(a.dims());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < a.size(); ++i) y[i] = a[i] * s;
  return y;
}

template <typename T>
TensorT<T> hadamard(const TensorT<T>& a, const TensorT<T>& b) {
  check_shape(a.dims() == b.dims(), "hadamard: dims mismatch");
  TensorT<T> y(a.dims());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  return y;
}

template <typename T>
double sum_all(const TensorT<T>& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Serial reference implementations. Independent naive code paths used by
// tests and by the kernel benchmark; not called from the production path.
// ---------------------------------------------------------------------------

namespace ref {

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>& bias) {
  conv2d_shape_check<T>(x.dims(), w.dims(), bias.dims());
  const Dims5 d = x.dims();
  const int64_t co_n = w.dims().b;
  TensorT<T> y(Dims5{d.b, co_n, d.f, d.h, d.w});
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t co = 0; co < co_n; ++co)
      for (int64_t f = 0; f < d.f; ++f)
        for (int64_t yy = 0; yy < d.h; ++yy)
          for (int64_t xx = 0; xx < d.w; ++xx) {
            double acc = static_cast<double>(bias[co]);
            for (int64_t ci = 0; ci < d.c; ++ci)
              for (int64_t ky = 0; ky < 3; ++ky)
                for (int64_t kx = 0; kx < 3; ++kx) {
                  const int64_t sy = yy + ky - 1, sx = xx + kx - 1;
                  if (sy < 0 || sy >= d.h || sx < 0 || sx >= d.w) continue;
                  acc += static_cast<double>(w.at(co, ci, 0, ky, kx)) *
                         static_cast<double>(x.at(b, ci, f, sy, sx));
                }
            y.at(b, co, f, yy, xx) = static_cast<T>(acc);
          }
  return y;
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain,
                      const TensorT<T>& offset, T eps) {
  const Dims5 d = x.dims();
  TensorT<T> y(d);
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t f = 0; f < d.f; ++f) {
      double s = 0.0;
      int64_t n = 0;
      for (int64_t c = 0; c < d.c; ++c)
        for (int64_t yy = 0; yy < d.h; ++yy)
          for (int64_t xx = 0; xx < d.w; ++xx) {
            s += static_cast<double>(x.at(b, c, f, yy, xx));
            ++n;
          }
      const double mean = s / n;
      double v = 0.0;
      for (int64_t c = 0; c < d.c; ++c)
        for (int64_t yy = 0; yy < d.h; ++yy)
          for (int64_t xx = 0; xx < d.w; ++xx) {
            const double e = static_cast<double>(x.at(b, c, f, yy, xx)) - mean;
            v += e * e;
          }
      const double inv = 1.0 / std::sqrt(v / n + static_cast<double>(eps));
      for (int64_t c = 0; c < d.c; ++c)
        for (int64_t yy = 0; yy < d.h; ++yy)
          for (int64_t xx = 0; xx < d.w; ++xx)
            y.at(b, c, f, yy, xx) =
                static_cast<T>((static_cast<double>(x.at(b, c, f, yy, xx)) - mean) *
                               inv) *
                    gain[c] +
                offset[c];
    }
  return y;
}

/// Plain double-precision softmax attention on one matrix triple; the
/// reference for scaled_attention and the dense full-frame oracle.
template <typename T>
void scaled_attention_matrix(const T* q, const T* k, const T* v, int64_t R,
                             int64_t D, const T* bias, double scale, T* out,
                             T* a_out = nullptr) {
  std::vector<double> logits(static_cast<size_t>(R) * R);
  for (int64_t i = 0; i < R; ++i)
    for (int64_t j = 0; j < R; ++j) {
      double dot = 0.0;
      for (int64_t d2 = 0; d2 < D; ++d2)
        dot += static_cast<double>(q[i * D + d2]) *
               static_cast<double>(k[j * D + d2]);
      logits[i * R + j] = dot / scale +
                          (bias ? static_cast<double>(bias[i * R + j]) : 0.0);
    }
  for (int64_t i = 0; i < R; ++i) {
    double m = logits[i * R];
    for (int64_t j = 1; j < R; ++j) m = std::max(m, logits[i * R + j]);
    double sum = 0.0;
    for (int64_t j = 0; j < R; ++j) {
      logits[i * R + j] = std::exp(logits[i * R + j] - m);
      sum += logits[i * R + j];
    }
    for (int64_t j = 0; j < R; ++j) logits[i * R + j] /= sum;
    if (a_out)
      for (int64_t j = 0; j < R; ++j)
        a_out[i * R + j] = static_cast<T>(logits[i * R + j]);
    for (int64_t d2 = 0; d2 < D; ++d2) {
      double acc = 0.0;
      for (int64_t j = 0; j < R; ++j)
        acc += logits[i * R + j] * static_cast<double>(v[j * D + d2]);
      out[i * D + d2] = static_cast<T>(acc);
    }
  }
}

}  // namespace ref

}  // namespace itx
