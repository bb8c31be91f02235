#pragma once

#include <cstdint>
#include <vector>

#include "itx/tensor.hpp"

namespace itx {

/// Complex-valued cine series stored as paired real/imaginary planes of
/// dims (1, 1, F, H, W). The series lives in SNR units: the acquisition
/// noise SD is 1, so pixel magnitude reads directly as SNR.
struct ComplexSeries {
  Tensor5D real, imag;
  double pixel_spacing_h = 1.0, pixel_spacing_w = 1.0;  // carried, unused by math

  Dims5 dims() const { return real.dims(); }

  void validate() const {
    check_shape(real.dims() == imag.dims(),
                "complex series: real/imag planes must share dims");
    check_shape(real.dims().b == 1 && real.dims().c == 1,
                "complex series planes must have dims (1,1,F,H,W)");
  }
};

/// Spatial noise-amplification map for a nominal parallel-imaging
/// acceleration R; g >= 1 everywhere.
struct GFactorMap {
  Tensor5D g;  // (1, 1, 1, H, W)
  double acceleration = 1.0;
};

/// Synthetic cine phantom: a blood-pool disc inside a myocardial ring whose
/// radii contract sinusoidally over the F frames (one beat), on a smooth
/// polynomial phase map. Levels default to the reported blood/myocardium
/// signal means.
struct PhantomSpec {
  int64_t height = 64, width = 64, frames = 8;
  double blood = 105.7;
  double myo = 37.0;
  double background = 2.0;
  double blood_radius = 0.16;    // fraction of min(H, W)
  double ring_gap = 0.04;        // dark rim between pool and ring
  double ring_thickness = 0.11;  // ring width fraction
  double center_jitter = 0.04;   // seeded center offset, fraction of min(H, W)
  double radius_jitter = 0.10;   // seeded radius scale in [1-j, 1+j]
  double beat = 0.08;            // radius modulation fraction over the beat
  double phase_amp = 1.2;        // phase polynomial coefficient scale, radians
  uint64_t seed = 0;

  void validate() const {
    check_config(height > 0 && width > 0 && frames > 0,
                 "phantom dims must be positive");
    check_config(blood > myo && myo > background && background >= 0.0,
                 "phantom requires blood > myocardium > background >= 0");
    check_config(beat >= 0.0 && beat < 1.0, "beat amplitude must be in [0,1)");
  }
};

struct Phantom {
  ComplexSeries truth;
  Tensor5D blood_mask;  // (1,1,F,H,W), 0/1, interior pixels only
  Tensor5D myo_mask;
};

/// Ordered target SNR levels and the seed for the per-level noise streams.
struct NoiseLadder {
  std::vector<double> targets{0.05, 0.1, 0.2, 0.5, 0.75,
                              1.0,  1.5, 2.0, 4.0, 8.0};
  uint64_t seed = 0;

  void validate() const {
    check_config(!targets.empty(), "ladder needs at least one target");
    for (size_t i = 0; i + 1 < targets.size(); ++i)
      check_config(targets[i] < targets[i + 1],
                   "ladder targets must be strictly increasing");
    check_config(targets.front() > 0.0, "ladder targets must be positive");
  }
};

struct LadderLevel {
  double target = 0.0;
  double noise_sd = 0.0;       // nn solved for this level
  double measured_snr = 0.0;   // re-measured global median SNR
  uint64_t seed = 0;
  ComplexSeries noisy;
};

Phantom gen_phantom(const PhantomSpec& spec);

GFactorMap gen_gfactor(double acceleration, int64_t h, int64_t w);

/// Adds zero-mean Gaussian noise with per-pixel SD nn * g(x, y) to the real
/// and imaginary planes of every frame, independently.
ComplexSeries add_mr_noise(const ComplexSeries& x, double noise_sd,
                           const GFactorMap& g, uint64_t seed);

/// median over foreground pixels and frames of |GT| / sqrt(1 + (nn*g)^2).
/// Foreground: ground-truth magnitude above 10% of the series maximum.
double global_median_snr(const ComplexSeries& truth, double noise_sd,
                         const GFactorMap& g);

/// Solves (by bisection; the median is strictly decreasing in nn) for the
/// noise SD whose re-measured median SNR hits the target within 0.5%.
double solve_noise_sd(const ComplexSeries& truth, const GFactorMap& g,
                      double target_snr);

std::vector<LadderLevel> make_snr_ladder(const ComplexSeries& truth,
                                         const GFactorMap& g,
                                         const NoiseLadder& ladder);

/// Model input (1, 3, F, H, W): real, imaginary, g-map broadcast per frame.
Tensor5D make_model_input(const ComplexSeries& series, const GFactorMap& g);

/// Training target (1, 2, F, H, W): real and imaginary ground truth.
Tensor5D make_model_target(const ComplexSeries& series);

/// Splits a (B, 2, F, H, W) two-channel tensor back into a complex series
/// (batch entry 0).
ComplexSeries series_from_two_channel(const Tensor5D& t);

}  // namespace itx
