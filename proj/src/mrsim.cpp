#include "itx/mrsim.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace itx {

namespace {

double smooth_coverage(double r, double radius, double edge) {
  // soft indicator of r < radius with a one-pixel anti-aliased edge
  return std::clamp((radius - r) / edge + 0.5, 0.0, 1.0);
}

}  // namespace

Phantom gen_phantom(const PhantomSpec& spec) {
  spec.validate();
  const int64_t H = spec.height, W = spec.width, F = spec.frames;
  const double m = static_cast<double>(std::min(H, W));

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double cx = (static_cast<double>(W) - 1.0) / 2.0 +
                    u(rng) * spec.center_jitter * m;
  const double cy = (static_cast<double>(H) - 1.0) / 2.0 +
                    u(rng) * spec.center_jitter * m;
  const double rscale = 1.0 + u(rng) * spec.radius_jitter;
  const double rb0 = spec.blood_radius * m * rscale;
  const double ri0 = (spec.blood_radius + spec.ring_gap) * m * rscale;
  const double ro0 =
      (spec.blood_radius + spec.ring_gap + spec.ring_thickness) * m * rscale;

  const double max_extent =
      ro0 + std::abs(cx - (W - 1) / 2.0) + std::abs(cy - (H - 1) / 2.0);
  if (max_extent > m / 2.0 - 1.0)
    throw ConfigError("phantom geometry exceeds image bounds");

  // smooth low-order polynomial phase map makes the data genuinely complex
  double pc[6];
  const double pscale[6] = {1.0, 0.6, 0.6, 0.4, 0.4, 0.4};
  for (int i = 0; i < 6; ++i) pc[i] = u(rng) * spec.phase_amp * pscale[i];

  Phantom out;
  Dims5 d{1, 1, F, H, W};
  out.truth.real = Tensor5D(d);
  out.truth.imag = Tensor5D(d);
  out.blood_mask = Tensor5D(d);
  out.myo_mask = Tensor5D(d);

  const double edge = 1.0;     // anti-aliasing width, px
  const double margin = 1.0;   // mask erosion, px

  for (int64_t f = 0; f < F; ++f) {
    // one beat over the F frames; beat = 0 keeps all frames identical
    const double s =
        1.0 - spec.beat * 0.5 *
                  (1.0 - std::cos(2.0 * M_PI * static_cast<double>(f) /
                                  static_cast<double>(F)));
    const double rb = rb0 * s, ri = ri0 * s, ro = ro0 * s;
    float* re = out.truth.real.plane(0, 0, f);
    float* im = out.truth.imag.plane(0, 0, f);
    float* bm = out.blood_mask.plane(0, 0, f);
    float* mm = out.myo_mask.plane(0, 0, f);
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        const double r = std::sqrt(dx * dx + dy * dy);
        const double cov_b = smooth_coverage(r, rb, edge);
        const double cov_ring =
            smooth_coverage(r, ro, edge) - smooth_coverage(r, ri, edge);
        const double mag = spec.background +
                           (spec.blood - spec.background) * cov_b +
                           (spec.myo - spec.background) * cov_ring;
        const double xn = 2.0 * static_cast<double>(x) / (W - 1 > 0 ? W - 1 : 1) - 1.0;
        const double yn = 2.0 * static_cast<double>(y) / (H - 1 > 0 ? H - 1 : 1) - 1.0;
        const double phase = pc[0] + pc[1] * xn + pc[2] * yn + pc[3] * xn * yn +
                             pc[4] * xn * xn + pc[5] * yn * yn;
        re[y * W + x] = static_cast<float>(mag * std::cos(phase));
        im[y * W + x] = static_cast<float>(mag * std::sin(phase));
        bm[y * W + x] = r <= rb - margin ? 1.0f : 0.0f;
        mm[y * W + x] = (r >= ri + margin && r <= ro - margin) ? 1.0f : 0.0f;
      }
  }
  return out;
}

GFactorMap gen_gfactor(double acceleration, int64_t h, int64_t w) {
  check_config(acceleration >= 1.0, "acceleration must be >= 1");
  check_config(h > 0 && w > 0, "g-factor map dims must be positive");
  GFactorMap out;
  out.acceleration = acceleration;
  out.g = Tensor5D(Dims5{1, 1, 1, h, w});
  // center pinned to a pixel so the map attains its maximum R exactly
  const int64_t cy = h / 2, cx = w / 2;
  const double sigma = static_cast<double>(std::min(h, w)) / 4.0;
  float* p = out.g.data();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double dy = static_cast<double>(y - cy);
      const double dx = static_cast<double>(x - cx);
      p[y * w + x] = static_cast<float>(
          1.0 + (acceleration - 1.0) *
                    std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
    }
  return out;
}

ComplexSeries add_mr_noise(const ComplexSeries& x, double noise_sd,
                           const GFactorMap& g, uint64_t seed) {
  x.validate();
  check_config(noise_sd >= 0.0, "noise SD must be non-negative");
  const Dims5 d = x.dims();
  check_shape(g.g.dims().h == d.h && g.g.dims().w == d.w,
              "g-factor map dims do not match series");
  ComplexSeries out = x;
  if (noise_sd == 0.0) return out;
  const int64_t plane = d.h * d.w;
  const float* gp = g.g.data();
#pragma omp parallel for schedule(static)
  for (int64_t f = 0; f < d.f; ++f) {
    // independent per-frame streams keep parallel generation deterministic
    std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(f)));
    std::normal_distribution<double> n(0.0, 1.0);
    float* re = out.real.plane(0, 0, f);
    float* im = out.imag.plane(0, 0, f);
    for (int64_t i = 0; i < plane; ++i) {
      const double sd = noise_sd * static_cast<double>(gp[i]);
      re[i] += static_cast<float>(n(rng) * sd);
      im[i] += static_cast<float>(n(rng) * sd);
    }
  }
  return out;
}

namespace {

/// Collects (magnitude, g) pairs for foreground pixels across all frames.
struct ForegroundSamples {
  std::vector<float> mag, g;
};

ForegroundSamples foreground_samples(const ComplexSeries& truth,
                                     const GFactorMap& g) {
  truth.validate();
  const Dims5 d = truth.dims();
  const int64_t plane = d.h * d.w;
  double max_mag = 0.0;
  std::vector<float> mags(static_cast<size_t>(d.f * plane));
  for (int64_t f = 0; f < d.f; ++f) {
    const float* re = truth.real.plane(0, 0, f);
    const float* im = truth.imag.plane(0, 0, f);
    for (int64_t i = 0; i < plane; ++i) {
      const double mv = std::hypot(static_cast<double>(re[i]),
                                   static_cast<double>(im[i]));
      mags[static_cast<size_t>(f * plane + i)] = static_cast<float>(mv);
      max_mag = std::max(max_mag, mv);
    }
  }
  const double thresh = 0.1 * max_mag;
  ForegroundSamples out;
  const float* gp = g.g.data();
  for (int64_t f = 0; f < d.f; ++f)
    for (int64_t i = 0; i < plane; ++i) {
      const float mv = mags[static_cast<size_t>(f * plane + i)];
      if (mv > thresh) {
        out.mag.push_back(mv);
        out.g.push_back(gp[i]);
      }
    }
  if (out.mag.empty())
    throw ShapeError("global_median_snr: empty foreground");
  return out;
}

double median_snr_of(const ForegroundSamples& s, double nn) {
  std::vector<double> vals(s.mag.size());
  for (size_t i = 0; i < s.mag.size(); ++i) {
    const double amp = nn * static_cast<double>(s.g[i]);
    vals[i] = static_cast<double>(s.mag[i]) / std::sqrt(1.0 + amp * amp);
  }
  const size_t n = vals.size();
  std::nth_element(vals.begin(), vals.begin() + n / 2, vals.end());
  double med = vals[n / 2];
  if (n % 2 == 0) {
    const double lo = *std::max_element(vals.begin(), vals.begin() + n / 2);
    med = 0.5 * (med + lo);
  }
  return med;
}

}  // namespace

double global_median_snr(const ComplexSeries& truth, double noise_sd,
                         const GFactorMap& g) {
  check_config(noise_sd >= 0.0, "noise SD must be non-negative");
  return median_snr_of(foreground_samples(truth, g), noise_sd);
}

double solve_noise_sd(const ComplexSeries& truth, const GFactorMap& g,
                      double target_snr) {
  check_config(target_snr > 0.0, "target SNR must be positive");
  ForegroundSamples s = foreground_samples(truth, g);
  const double base = median_snr_of(s, 0.0);
  if (target_snr > base)
    throw ConfigError("target SNR " + std::to_string(target_snr) +
                      " is not below the current median SNR " +
                      std::to_string(base));
  if (target_snr == base) return 0.0;
  double lo = 0.0, hi = 1.0;
  int guard = 0;
  while (median_snr_of(s, hi) > target_snr) {
    hi *= 2.0;
    check_config(++guard < 80, "solve_noise_sd: bracket search failed");
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double snr = median_snr_of(s, mid);
    if (snr > target_snr)
      lo = mid;
    else
      hi = mid;
    if (std::abs(snr - target_snr) <= 1e-4 * target_snr) break;
  }
  return 0.5 * (lo + hi);
}

std::vector<LadderLevel> make_snr_ladder(const ComplexSeries& truth,
                                         const GFactorMap& g,
                                         const NoiseLadder& ladder) {
  ladder.validate();
  std::vector<LadderLevel> out;
  for (size_t i = 0; i < ladder.targets.size(); ++i) {
    LadderLevel lvl;
    lvl.target = ladder.targets[i];
    lvl.noise_sd = solve_noise_sd(truth, g, lvl.target);
    lvl.measured_snr = global_median_snr(truth, lvl.noise_sd, g);
    lvl.seed = mix_seed(ladder.seed, i);
    lvl.noisy = add_mr_noise(truth, lvl.noise_sd, g, lvl.seed);
    out.push_back(std::move(lvl));
  }
  return out;
}

Tensor5D make_model_input(const ComplexSeries& series, const GFactorMap& g) {
  series.validate();
  const Dims5 d = series.dims();
  check_shape(g.g.dims().h == d.h && g.g.dims().w == d.w,
              "g-factor map dims do not match series");
  Tensor5D out(Dims5{1, 3, d.f, d.h, d.w});
  const int64_t plane = d.h * d.w;
  for (int64_t f = 0; f < d.f; ++f) {
    std::copy(series.real.plane(0, 0, f), series.real.plane(0, 0, f) + plane,
              out.plane(0, 0, f));
    std::copy(series.imag.plane(0, 0, f), series.imag.plane(0, 0, f) + plane,
              out.plane(0, 1, f));
    std::copy(g.g.data(), g.g.data() + plane, out.plane(0, 2, f));
  }
  return out;
}

Tensor5D make_model_target(const ComplexSeries& series) {
  series.validate();
  const Dims5 d = series.dims();
  Tensor5D out(Dims5{1, 2, d.f, d.h, d.w});
  const int64_t plane = d.h * d.w;
  for (int64_t f = 0; f < d.f; ++f) {
    std::copy(series.real.plane(0, 0, f), series.real.plane(0, 0, f) + plane,
              out.plane(0, 0, f));
    std::copy(series.imag.plane(0, 0, f), series.imag.plane(0, 0, f) + plane,
              out.plane(0, 1, f));
  }
  return out;
}

ComplexSeries series_from_two_channel(const Tensor5D& t) {
  const Dims5 d = t.dims();
  check_shape(d.c == 2, "expected a two-channel (real, imag) tensor");
  ComplexSeries out;
  Dims5 pd{1, 1, d.f, d.h, d.w};
  out.real = Tensor5D(pd);
  out.imag = Tensor5D(pd);
  const int64_t plane = d.h * d.w;
  for (int64_t f = 0; f < d.f; ++f) {
    std::copy(t.plane(0, 0, f), t.plane(0, 0, f) + plane,
              out.real.plane(0, 0, f));
    std::copy(t.plane(0, 1, f), t.plane(0, 1, f) + plane,
              out.imag.plane(0, 0, f));
  }
  return out;
}

}  // namespace itx
