#include "itx/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace itx {

Tensor5D magnitude(const ComplexSeries& x) {
  x.validate();
  const Dims5 d = x.dims();
  Tensor5D out(d);
  for (int64_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(std::hypot(static_cast<double>(x.real[i]),
                                           static_cast<double>(x.imag[i])));
  return out;
}

Tensor5D magnitude(const Tensor5D& two_channel) {
  const Dims5 d = two_channel.dims();
  check_shape(d.c == 2, "magnitude: expected two channels (real, imag)");
  Tensor5D out(Dims5{d.b, 1, d.f, d.h, d.w});
  const int64_t plane = d.h * d.w;
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t f = 0; f < d.f; ++f) {
      const float* re = two_channel.plane(b, 0, f);
      const float* im = two_channel.plane(b, 1, f);
      float* q = out.plane(b, 0, f);
      for (int64_t i = 0; i < plane; ++i)
        q[i] = static_cast<float>(std::hypot(static_cast<double>(re[i]),
                                             static_cast<double>(im[i])));
    }
  return out;
}

double psnr(const Tensor5D& pred, const Tensor5D& gt, double max_val) {
  check_shape(pred.dims() == gt.dims(), "psnr: dims mismatch");
  check_config(max_val > 0.0, "psnr: max_val must be positive");
  double mse = 0.0;
  for (int64_t i = 0; i < pred.size(); ++i) {
    const double e = static_cast<double>(pred[i]) - static_cast<double>(gt[i]);
    mse += e * e;
  }
  mse /= static_cast<double>(pred.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

namespace {

std::vector<double> gaussian_window_1d() {
  // 11-tap Gaussian, sigma 1.5, normalized
  std::vector<double> w(11);
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double x = static_cast<double>(i - 5);
    w[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

/// Separable Gaussian filter, valid region only: output is (H-10) x (W-10).
void gauss_filter_valid(const std::vector<double>& img, int64_t h, int64_t w,
                        std::vector<double>& out) {
  static const std::vector<double> win = gaussian_window_1d();
  const int64_t vw = w - 10, vh = h - 10;
  std::vector<double> tmp(static_cast<size_t>(h * vw));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < vw; ++x) {
      double acc = 0.0;
      for (int k = 0; k < 11; ++k) acc += win[k] * img[y * w + x + k];
      tmp[y * vw + x] = acc;
    }
  out.assign(static_cast<size_t>(vh * vw), 0.0);
  for (int64_t y = 0; y < vh; ++y)
    for (int64_t x = 0; x < vw; ++x) {
      double acc = 0.0;
      for (int k = 0; k < 11; ++k) acc += win[k] * tmp[(y + k) * vw + x];
      out[y * vw + x] = acc;
    }
}

}  // namespace

double ssim(const Tensor5D& pred, const Tensor5D& gt, double dynamic_range) {
  check_shape(pred.dims() == gt.dims(), "ssim: dims mismatch");
  const Dims5 d = pred.dims();
  check_shape(d.c == 1, "ssim operates on single-channel magnitude stacks");
  if (d.h < 11 || d.w < 11)
    throw ShapeError("ssim requires images of at least 11x11, got " + d.str());
  const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
  const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
  const int64_t plane = d.h * d.w;
  double total = 0.0;
  int64_t frames = 0;
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t f = 0; f < d.f; ++f) {
      const float* xp = pred.plane(b, 0, f);
      const float* yp = gt.plane(b, 0, f);
      std::vector<double> x(xp, xp + plane), y(yp, yp + plane);
      std::vector<double> xx(static_cast<size_t>(plane)),
          yy(static_cast<size_t>(plane)), xy(static_cast<size_t>(plane));
      for (int64_t i = 0; i < plane; ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
      }
      std::vector<double> mx, my, mxx, myy, mxy;
      gauss_filter_valid(x, d.h, d.w, mx);
      gauss_filter_valid(y, d.h, d.w, my);
      gauss_filter_valid(xx, d.h, d.w, mxx);
      gauss_filter_valid(yy, d.h, d.w, myy);
      gauss_filter_valid(xy, d.h, d.w, mxy);
      double acc = 0.0;
      for (size_t i = 0; i < mx.size(); ++i) {
        const double vx = mxx[i] - mx[i] * mx[i];
        const double vy = myy[i] - my[i] * my[i];
        const double cov = mxy[i] - mx[i] * my[i];
        acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      }
      total += acc / static_cast<double>(mx.size());
      ++frames;
    }
  return total / static_cast<double>(frames);
}

double masked_mean(const Tensor5D& img, const Tensor5D& mask) {
  check_shape(img.dims() == mask.dims(), "masked_mean: dims mismatch");
  double sum = 0.0;
  int64_t n = 0;
  for (int64_t i = 0; i < img.size(); ++i)
    if (mask[i] != 0.0f) {
      sum += static_cast<double>(img[i]);
      ++n;
    }
  check_shape(n > 0, "masked_mean: empty mask");
  return sum / static_cast<double>(n);
}

double cnr(const Tensor5D& img, const Tensor5D& blood_mask,
           const Tensor5D& myo_mask, double sigma) {
  check_config(sigma > 0.0, "cnr: sigma must be positive");
  for (int64_t i = 0; i < blood_mask.size(); ++i)
    check_shape(!(blood_mask[i] != 0.0f && myo_mask[i] != 0.0f),
                "cnr: masks must be disjoint");
  return (masked_mean(img, blood_mask) - masked_mean(img, myo_mask)) / sigma;
}

BlandAltmanResult bland_altman(const std::vector<double>& a,
                               const std::vector<double>& b) {
  check_shape(a.size() == b.size(), "bland_altman: length mismatch");
  check_shape(a.size() >= 2, "bland_altman: need at least 2 pairs");
  const size_t n = a.size();
  double mean = 0.0;
  for (size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double e = a[i] - b[i] - mean;
    var += e * e;
  }
  var /= static_cast<double>(n - 1);
  BlandAltmanResult res;
  res.mean_dev = mean;
  res.cr90 = 2.0 * 1.645 * std::sqrt(var);
  return res;
}

}  // namespace itx
