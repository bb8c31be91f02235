#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "itx/metrics.hpp"
#include "itx/mrsim.hpp"
#include "testutil.hpp"

using namespace itx;
using testutil::rand_tensor;

namespace {

/// Naive windowed SSIM, written independently of the separable-filter
/// implementation in the library.
double ssim_oracle(const Tensor5D& x, const Tensor5D& y, double L) {
  const Dims5 d = x.dims();
  std::vector<double> win(121);
  double wsum = 0.0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      const double dy = i - 5, dx = j - 5;
      win[i * 11 + j] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
      wsum += win[i * 11 + j];
    }
  for (double& w : win) w /= wsum;
  const double c1 = std::pow(0.01 * L, 2), c2 = std::pow(0.03 * L, 2);
  double total = 0.0;
  int64_t frames = 0;
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t f = 0; f < d.f; ++f) {
      const float* xp = x.plane(b, 0, f);
      const float* yp = y.plane(b, 0, f);
      double acc = 0.0;
      int64_t cnt = 0;
      for (int64_t cy = 5; cy < d.h - 5; ++cy)
        for (int64_t cx = 5; cx < d.w - 5; ++cx) {
          double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
          for (int i = 0; i < 11; ++i)
            for (int j = 0; j < 11; ++j) {
              const double w = win[i * 11 + j];
              const double xv = xp[(cy + i - 5) * d.w + cx + j - 5];
              const double yv = yp[(cy + i - 5) * d.w + cx + j - 5];
              mx += w * xv;
              my += w * yv;
              mxx += w * xv * xv;
              myy += w * yv * yv;
              mxy += w * xv * yv;
            }
          const double vx = mxx - mx * mx, vy = myy - my * my;
          const double cov = mxy - mx * my;
          acc += (2 * mx * my + c1) * (2 * cov + c2) /
                 ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++cnt;
        }
      total += acc / static_cast<double>(cnt);
      ++frames;
    }
  return total / static_cast<double>(frames);
}

}  // namespace

TEST_CASE("magnitude") {
  ComplexSeries s;
  s.real = Tensor5D(Dims5{1, 1, 1, 1, 3}, {3.0f, 0.0f, -1.5f});
  s.imag = Tensor5D(Dims5{1, 1, 1, 1, 3}, {4.0f, 0.0f, 0.0f});
  Tensor5D m = magnitude(s);
  CHECK(m[0] == doctest::Approx(5.0f));
  CHECK(m[1] == 0.0f);
  CHECK(m[2] == doctest::Approx(1.5f));

  Tensor5D two = rand_tensor({2, 2, 2, 3, 3}, 1);
  Tensor5D mm = magnitude(two);
  CHECK(mm.dims() == Dims5{2, 1, 2, 3, 3});
}

TEST_CASE("psnr: formula points, infinity, oracle, monotonicity") {
  const double maxv = 2048.0;
  Tensor5D gt(Dims5{1, 1, 1, 4, 4}, 0.0f);
  Tensor5D off(Dims5{1, 1, 1, 4, 4}, static_cast<float>(maxv));
  CHECK(psnr(off, gt, maxv) == doctest::Approx(0.0).epsilon(1e-9));

  Tensor5D off10(Dims5{1, 1, 1, 4, 4}, static_cast<float>(maxv / 10.0));
  CHECK(psnr(off10, gt, maxv) == doctest::Approx(20.0).epsilon(1e-6));

  CHECK(std::isinf(psnr(gt, gt, maxv)));

  Tensor5D a = rand_tensor({1, 1, 2, 6, 6}, 2, 0.0f, 100.0f);
  Tensor5D b = rand_tensor({1, 1, 2, 6, 6}, 3, 0.0f, 100.0f);
  double mse = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double e = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    mse += e * e;
  }
  mse /= static_cast<double>(a.size());
  const double want = 10.0 * std::log10(maxv * maxv / mse);
  CHECK(std::abs(psnr(a, b, maxv) - want) < 1e-6);

  // strictly decreasing in MSE
  Tensor5D c1(Dims5{1, 1, 1, 4, 4}, 10.0f), c2(Dims5{1, 1, 1, 4, 4}, 20.0f);
  CHECK(psnr(c2, gt, maxv) < psnr(c1, gt, maxv));
}

TEST_CASE("ssim: identity, anti-correlation, symmetry, oracle") {
  Tensor5D x = rand_tensor({1, 1, 1, 16, 16}, 4, 0.0f, 300.0f);
  CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-9));

  // zero-mean +/- high-variance pattern: negation flips local structure
  Tensor5D z = rand_tensor({1, 1, 1, 16, 16}, 5, -150.0f, 150.0f);
  Tensor5D zn(z.dims());
  for (int64_t i = 0; i < z.size(); ++i) zn[i] = -z[i];
  CHECK(ssim(z, zn) < 0.0);

  Tensor5D y = rand_tensor({1, 1, 1, 16, 16}, 6, 0.0f, 300.0f);
  CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-12));

  for (uint64_t s = 0; s < 3; ++s) {
    Tensor5D u = rand_tensor({1, 1, 2, 14, 18}, 10 + s, 0.0f, 500.0f);
    Tensor5D v = rand_tensor({1, 1, 2, 14, 18}, 20 + s, 0.0f, 500.0f);
    CHECK(std::abs(ssim(u, v) - ssim_oracle(u, v, 2048.0)) < 1e-5);
  }

  Tensor5D small = rand_tensor({1, 1, 1, 8, 8}, 7);
  CHECK_THROWS_AS(ssim(small, small), ShapeError);
}

TEST_CASE("cnr: definition, invariances, errors") {
  Tensor5D img(Dims5{1, 1, 1, 2, 2}, {105.7f, 105.7f, 37.0f, 37.0f});
  Tensor5D blood(Dims5{1, 1, 1, 2, 2}, {1, 1, 0, 0});
  Tensor5D myo(Dims5{1, 1, 1, 2, 2}, {0, 0, 1, 1});
  CHECK(cnr(img, blood, myo, 1.0) == doctest::Approx(68.7).epsilon(1e-6));
  CHECK(cnr(img, blood, myo, 2.0) == doctest::Approx(34.35).epsilon(1e-6));

  Tensor5D same(Dims5{1, 1, 1, 2, 2}, 5.0f);
  CHECK(cnr(same, blood, myo, 1.0) == 0.0);

  // adding a constant leaves CNR unchanged
  Tensor5D shifted = img;
  for (int64_t i = 0; i < shifted.size(); ++i) shifted[i] += 11.0f;
  CHECK(cnr(shifted, blood, myo, 1.0) ==
        doctest::Approx(cnr(img, blood, myo, 1.0)).epsilon(1e-9));

  Tensor5D overlap(Dims5{1, 1, 1, 2, 2}, {1, 0, 1, 0});
  CHECK_THROWS_AS(cnr(img, blood, overlap, 1.0), ShapeError);
  CHECK_THROWS_AS(cnr(img, blood, myo, 0.0), ConfigError);
  Tensor5D empty(Dims5{1, 1, 1, 2, 2}, 0.0f);
  CHECK_THROWS_AS(cnr(img, empty, myo, 1.0), ShapeError);
}

TEST_CASE("bland-altman: identity, closed form, shifts, symmetry") {
  std::vector<double> a{1, 2, 3, 4}, same{1, 2, 3, 4};
  auto r0 = bland_altman(a, same);
  CHECK(r0.mean_dev == 0.0);
  CHECK(r0.cr90 == 0.0);

  // diffs {-2, +2}: sample SD 2.828, CR width 9.3066
  auto r1 = bland_altman({0.0, 2.0}, {2.0, 0.0});
  CHECK(r1.mean_dev == doctest::Approx(0.0));
  CHECK(r1.cr90 == doctest::Approx(2.0 * 1.645 * std::sqrt(8.0)).epsilon(1e-9));
  CHECK(r1.cr90 == doctest::Approx(9.3055).epsilon(1e-4));

  // shifting a by c moves the mean deviation by c, CR unchanged
  std::vector<double> b{2.0, 1.5, 5.0, 3.0};
  auto base = bland_altman(a, b);
  std::vector<double> ac = a;
  for (double& v : ac) v += 2.5;
  auto shifted = bland_altman(ac, b);
  CHECK(shifted.mean_dev == doctest::Approx(base.mean_dev + 2.5).epsilon(1e-9));
  CHECK(shifted.cr90 == doctest::Approx(base.cr90).epsilon(1e-9));

  // antisymmetric mean, swap-invariant CR
  auto swapped = bland_altman(b, a);
  CHECK(swapped.mean_dev == doctest::Approx(-base.mean_dev).epsilon(1e-12));
  CHECK(swapped.cr90 == doctest::Approx(base.cr90).epsilon(1e-12));

  CHECK_THROWS_AS(bland_altman({1.0}, {1.0}), ShapeError);
  CHECK_THROWS_AS(bland_altman({1.0, 2.0}, {1.0}), ShapeError);
}

TEST_CASE("noisier inputs score lower on both metrics") {
  PhantomSpec spec;
  spec.height = 32;
  spec.width = 32;
  spec.frames = 2;
  spec.seed = 30;
  Phantom ph = gen_phantom(spec);
  GFactorMap g = gen_gfactor(4.0, 32, 32);
  Tensor5D gt_mag = magnitude(ph.truth);

  NoiseLadder ladder;
  ladder.targets = {0.5, 2.0, 8.0};
  ladder.seed = 31;
  auto levels = make_snr_ladder(ph.truth, g, ladder);
  double prev_psnr = -1e30, prev_ssim = -1e30;
  for (const auto& lvl : levels) {
    Tensor5D m = magnitude(lvl.noisy);
    const double p = psnr(m, gt_mag);
    const double s = ssim(m, gt_mag);
    CHECK(p > prev_psnr);
    CHECK(s > prev_ssim);
    prev_psnr = p;
    prev_ssim = s;
  }
}
