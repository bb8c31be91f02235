#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <tuple>
#include <vector>

#include "itx/tensor.hpp"

namespace itx {

/// Attention window geometry: window side w and patch side p, in pixels.
struct WindowSpec {
  int64_t window = 8;
  int64_t patch = 2;

  void validate() const {
    check_config(window > 0 && patch > 0, "window and patch must be positive");
    check_config(window % patch == 0, "patch must divide window");
  }

  /// P = (w/p)^2 patches per window.
  int64_t patches_per_window() const {
    return (window / patch) * (window / patch);
  }
  /// N = (H/w)(W/w) windows per frame.
  int64_t windows_per_frame(int64_t h, int64_t w) const {
    return (h / window) * (w / window);
  }
};

enum class MatrixLayout { Local, Global, Frame };

/// A stack of equally sized 2D data matrices plus the metadata needed to
/// scatter them back into the source tensor. The stack is stored as a
/// tensor of dims (count, 1, 1, rows, cols).
template <typename T>
struct DataMatrixSetT {
  MatrixLayout layout = MatrixLayout::Local;
  Dims5 source_dims;
  WindowSpec ws;
  int64_t count = 0, rows = 0, cols = 0;
  TensorT<T> stack;

  const T* matrix(int64_t i) const { return stack.data() + i * rows * cols; }
  T* matrix(int64_t i) { return stack.data() + i * rows * cols; }
};

using DataMatrixSet = DataMatrixSetT<float>;

// ---------------------------------------------------------------------------
// Index maps. Each map sends a flat stack index to the flat source index it
// reads from; the maps are bijections, so scatter is the reverse walk.
//
// Row layout shared by Local and Global matrices: a patch flattens to a
// Cp^2 vector in channel-major order, pixel raster order within the patch:
//   col = c*p*p + dy*p + dx.
// ---------------------------------------------------------------------------

inline std::vector<int64_t> local_index_map(Dims5 d, WindowSpec ws) {
  ws.validate();
  check_shape(d.h % ws.window == 0 && d.w % ws.window == 0,
              "H and W must be divisible by window " +
                  std::to_string(ws.window) + ", got " + d.str());
  const int64_t p = ws.patch, gw = ws.window / p;
  const int64_t nwy = d.h / ws.window, nwx = d.w / ws.window;
  std::vector<int64_t> map(static_cast<size_t>(d.numel()));
  int64_t out = 0;
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t f = 0; f < d.f; ++f)
      for (int64_t wy = 0; wy < nwy; ++wy)
        for (int64_t wx = 0; wx < nwx; ++wx)
          // one matrix per (b, f, window): P rows in patch raster order
          for (int64_t py = 0; py < gw; ++py)
            for (int64_t px = 0; px < gw; ++px)
              for (int64_t c = 0; c < d.c; ++c)
                for (int64_t dy = 0; dy < p; ++dy)
                  for (int64_t dx = 0; dx < p; ++dx) {
                    int64_t y = wy * ws.window + py * p + dy;
                    int64_t x = wx * ws.window + px * p + dx;
                    map[out++] =
                        (((b * d.c + c) * d.f + f) * d.h + y) * d.w + x;
                  }
  return map;
}

inline std::vector<int64_t> global_index_map(Dims5 d, WindowSpec ws) {
  ws.validate();
  check_shape(d.h % ws.window == 0 && d.w % ws.window == 0,
              "H and W must be divisible by window " +
                  std::to_string(ws.window) + ", got " + d.str());
  const int64_t p = ws.patch, gw = ws.window / p;
  const int64_t nwy = d.h / ws.window, nwx = d.w / ws.window;
  std::vector<int64_t> map(static_cast<size_t>(d.numel()));
  int64_t out = 0;
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t f = 0; f < d.f; ++f)
      // one matrix per (b, f, patch-position): N rows in window raster order
      for (int64_t py = 0; py < gw; ++py)
        for (int64_t px = 0; px < gw; ++px)
          for (int64_t wy = 0; wy < nwy; ++wy)
            for (int64_t wx = 0; wx < nwx; ++wx)
              for (int64_t c = 0; c < d.c; ++c)
                for (int64_t dy = 0; dy < p; ++dy)
                  for (int64_t dx = 0; dx < p; ++dx) {
                    int64_t y = wy * ws.window + py * p + dy;
                    int64_t x = wx * ws.window + px * p + dx;
                    map[out++] =
                        (((b * d.c + c) * d.f + f) * d.h + y) * d.w + x;
                  }
  return map;
}

inline std::vector<int64_t> frame_index_map(Dims5 d) {
  check_shape(d.f >= 1, "frame layout needs F >= 1");
  std::vector<int64_t> map(static_cast<size_t>(d.numel()));
  int64_t out = 0;
  for (int64_t b = 0; b < d.b; ++b)
    // one matrix per batch: row i is frame i flattened channel-major
    for (int64_t f = 0; f < d.f; ++f)
      for (int64_t c = 0; c < d.c; ++c)
        for (int64_t y = 0; y < d.h; ++y)
          for (int64_t x = 0; x < d.w; ++x)
            map[out++] = (((b * d.c + c) * d.f + f) * d.h + y) * d.w + x;
  return map;
}

/// Maps are pure functions of (layout, dims, ws); cache them since attention
/// rebuilds the same map for Q, K, V and the scatter on every forward.
inline std::shared_ptr<const std::vector<int64_t>> cached_index_map(
    MatrixLayout layout, Dims5 d, WindowSpec ws) {
  using Key = std::tuple<int, int64_t, int64_t, int64_t, int64_t, int64_t,
                         int64_t, int64_t>;
  static std::map<Key, std::shared_ptr<const std::vector<int64_t>>> cache;
  static std::mutex mu;
  Key key{static_cast<int>(layout), d.b, d.c, d.f, d.h, d.w,
          layout == MatrixLayout::Frame ? 0 : ws.window,
          layout == MatrixLayout::Frame ? 0 : ws.patch};
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  std::shared_ptr<const std::vector<int64_t>> map;
  switch (layout) {
    case MatrixLayout::Local:
      map = std::make_shared<const std::vector<int64_t>>(local_index_map(d, ws));
      break;
    case MatrixLayout::Global:
      map = std::make_shared<const std::vector<int64_t>>(global_index_map(d, ws));
      break;
    case MatrixLayout::Frame:
      map = std::make_shared<const std::vector<int64_t>>(frame_index_map(d));
      break;
  }
  cache.emplace(key, map);
  return map;
}

template <typename T>
DataMatrixSetT<T> assemble_local(const TensorT<T>& x, WindowSpec ws) {
  DataMatrixSetT<T> out;
  out.layout = MatrixLayout::Local;
  out.source_dims = x.dims();
  out.ws = ws;
  const Dims5& d = x.dims();
  auto map = cached_index_map(MatrixLayout::Local, d, ws);
  out.count = d.b * d.f * ws.windows_per_frame(d.h, d.w);
  out.rows = ws.patches_per_window();
  out.cols = d.c * ws.patch * ws.patch;
  out.stack = TensorT<T>(Dims5{out.count, 1, 1, out.rows, out.cols});
  for (int64_t i = 0; i < x.size(); ++i) out.stack[i] = x[(*map)[i]];
  return out;
}

template <typename T>
DataMatrixSetT<T> assemble_global(const TensorT<T>& x, WindowSpec ws) {
  DataMatrixSetT<T> out;
  out.layout = MatrixLayout::Global;
  out.source_dims = x.dims();
  out.ws = ws;
  const Dims5& d = x.dims();
  auto map = cached_index_map(MatrixLayout::Global, d, ws);
  out.count = d.b * d.f * ws.patches_per_window();
  out.rows = ws.windows_per_frame(d.h, d.w);
  out.cols = d.c * ws.patch * ws.patch;
  out.stack = TensorT<T>(Dims5{out.count, 1, 1, out.rows, out.cols});
  for (int64_t i = 0; i < x.size(); ++i) out.stack[i] = x[(*map)[i]];
  return out;
}

template <typename T>
DataMatrixSetT<T> assemble_frame(const TensorT<T>& x) {
  DataMatrixSetT<T> out;
  out.layout = MatrixLayout::Frame;
  out.source_dims = x.dims();
  const Dims5& d = x.dims();
  auto map = cached_index_map(MatrixLayout::Frame, d, out.ws);
  out.count = d.b;
  out.rows = d.f;
  out.cols = d.c * d.h * d.w;
  out.stack = TensorT<T>(Dims5{out.count, 1, 1, out.rows, out.cols});
  for (int64_t i = 0; i < x.size(); ++i) out.stack[i] = x[(*map)[i]];
  return out;
}

/// Exact inverse of the corresponding assemble_* on unmodified matrices.
template <typename T>
TensorT<T> scatter_inverse(const DataMatrixSetT<T>& dms) {
  check_shape(dms.source_dims.numel() == dms.stack.size(),
              "scatter_inverse: incomplete or inconsistent index metadata");
  auto map = cached_index_map(dms.layout, dms.source_dims, dms.ws);
  TensorT<T> out(dms.source_dims);
  for (int64_t i = 0; i < dms.stack.size(); ++i)
    out[(*map)[i]] = dms.stack[i];
  return out;
}

// ---------------------------------------------------------------------------
// Window padding. H and W are padded at the bottom/right up to the next
// multiple of w with mirrored values, and cropped again after attention.
// ---------------------------------------------------------------------------

struct PadRecord {
  Dims5 original;
  int64_t h_lo = 0, h_hi = 0;  // rows added at top / bottom
  int64_t w_lo = 0, w_hi = 0;  // cols added at left / right
};

/// Mirror-folds index i into [0, n); period 2n, edge included so any
/// pad amount is valid even for n == 1.
inline int64_t mirror_fold(int64_t i, int64_t n) {
  int64_t m = i % (2 * n);
  return m < n ? m : 2 * n - 1 - m;
}

template <typename T>
std::pair<TensorT<T>, PadRecord> pad_to_window(const TensorT<T>& x,
                                               WindowSpec ws) {
  ws.validate();
  const Dims5& d = x.dims();
  PadRecord rec;
  rec.original = d;
  rec.h_hi = (ws.window - d.h % ws.window) % ws.window;
  rec.w_hi = (ws.window - d.w % ws.window) % ws.window;
  if (rec.h_hi == 0 && rec.w_hi == 0) return {x, rec};
  Dims5 pd = d;
  pd.h += rec.h_hi;
  pd.w += rec.w_hi;
  TensorT<T> out(pd);
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t c = 0; c < d.c; ++c)
      for (int64_t f = 0; f < d.f; ++f) {
        const T* src = x.plane(b, c, f);
        T* dst = out.plane(b, c, f);
        for (int64_t y = 0; y < pd.h; ++y) {
          int64_t sy = mirror_fold(y, d.h);
          for (int64_t x2 = 0; x2 < pd.w; ++x2)
            dst[y * pd.w + x2] = src[sy * d.w + mirror_fold(x2, d.w)];
        }
      }
  return {std::move(out), rec};
}

template <typename T>
TensorT<T> crop_pad(const TensorT<T>& x, const PadRecord& rec) {
  if (x.dims() == rec.original) return x;
  const Dims5& d = rec.original;
  check_shape(x.dims().h == d.h + rec.h_lo + rec.h_hi &&
                  x.dims().w == d.w + rec.w_lo + rec.w_hi &&
                  x.dims().b == d.b && x.dims().c == d.c && x.dims().f == d.f,
              "crop_pad: tensor does not match pad record");
  TensorT<T> out(d);
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t c = 0; c < d.c; ++c)
      for (int64_t f = 0; f < d.f; ++f) {
        const T* src = x.plane(b, c, f);
        T* dst = out.plane(b, c, f);
        for (int64_t y = 0; y < d.h; ++y)
          for (int64_t x2 = 0; x2 < d.w; ++x2)
            dst[y * d.w + x2] =
                src[(y + rec.h_lo) * x.dims().w + (x2 + rec.w_lo)];
      }
  return out;
}

}  // namespace itx
