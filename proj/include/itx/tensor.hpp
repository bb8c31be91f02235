#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace itx {

/// Thrown for shape, divisibility and metadata violations.
class ShapeError : public std::runtime_error {
public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown for invalid model / run configuration.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline void check_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

/// Dimensions of the universal imaging tensor [B, C, F, H, W]:
/// batch, channels, frames (time/slice), height, width.
struct Dims5 {
  int64_t b = 0, c = 0, f = 0, h = 0, w = 0;

  int64_t numel() const { return b * c * f * h * w; }

  bool operator==(const Dims5& o) const {
    return b == o.b && c == o.c && f == o.f && h == o.h && w == o.w;
  }
  bool operator!=(const Dims5& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "[" << b << "," << c << "," << f << "," << h << "," << w << "]";
    return os.str();
  }
};

/// Dense row-major 5D tensor. Complex data rides as two channels.
template <typename T>
class TensorT {
public:
  TensorT() = default;

  explicit TensorT(Dims5 d, T fill = T(0)) : dims_(d) {
    check_shape(d.b >= 0 && d.c >= 0 && d.f >= 0 && d.h >= 0 && d.w >= 0,
                "tensor dims must be non-negative: " + d.str());
    data_.assign(static_cast<size_t>(d.numel()), fill);
  }

  TensorT(Dims5 d, std::vector<T> data) : dims_(d), data_(std::move(data)) {
    check_shape(static_cast<int64_t>(data_.size()) == d.numel(),
                "data length does not match dims " + d.str());
  }

  const Dims5& dims() const { return dims_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  int64_t index(int64_t b, int64_t c, int64_t f, int64_t h, int64_t w) const {
    return (((b * dims_.c + c) * dims_.f + f) * dims_.h + h) * dims_.w + w;
  }

  T& at(int64_t b, int64_t c, int64_t f, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(index(b, c, f, h, w))];
  }
  const T& at(int64_t b, int64_t c, int64_t f, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(index(b, c, f, h, w))];
  }

  /// Pointer to the start of frame (b, c, f); rows are contiguous.
  T* plane(int64_t b, int64_t c, int64_t f) {
    return data() + index(b, c, f, 0, 0);
  }
  const T* plane(int64_t b, int64_t c, int64_t f) const {
    return data() + index(b, c, f, 0, 0);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(dims_);
    for (int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool same_values(const TensorT& o) const {
    return dims_ == o.dims_ && data_ == o.data_;
  }

private:
  Dims5 dims_;
  std::vector<T> data_;
};

using Tensor5D = TensorT<float>;
using Tensor5Dd = TensorT<double>;

template <typename T>
TensorT<T> random_uniform(Dims5 d, T lo, T hi, uint64_t seed) {
  TensorT<T> t(d);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                              static_cast<double>(hi));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
TensorT<T> random_normal(Dims5 d, T mean, T sd, uint64_t seed) {
  TensorT<T> t(d);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(static_cast<double>(mean),
                                        static_cast<double>(sd));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

/// Stable stream splitter for deriving per-frame / per-level seeds.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace itx
