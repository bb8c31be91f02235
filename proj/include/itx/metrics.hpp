#pragma once

#include <string>
#include <vector>

#include "itx/mrsim.hpp"
#include "itx/tensor.hpp"

namespace itx {

/// Per-case quality metrics plus the optional sweep-level agreement summary.
struct MetricsReport {
  std::string case_id;
  double target_snr = 0.0;
  double psnr_db = 0.0;   // +infinity for identical images
  double ssim = 0.0;      // in [-1, 1]
  double cnr_in = 0.0;
  double cnr_out = 0.0;
  double cnr_gt = 0.0;
};

struct BlandAltmanResult {
  double mean_dev = 0.0;
  double cr90 = 0.0;  // width of the mean +/- 1.645*SD band
};

/// Per-pixel sqrt(re^2 + im^2) of a complex series -> (1,1,F,H,W).
Tensor5D magnitude(const ComplexSeries& x);

/// Same for a (B,2,F,H,W) two-channel tensor -> (B,1,F,H,W).
Tensor5D magnitude(const Tensor5D& two_channel);

/// 10*log10(max_val^2 / MSE); +infinity when the images are identical.
double psnr(const Tensor5D& pred, const Tensor5D& gt, double max_val = 2048.0);

/// Mean local SSIM, 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03,
/// averaged over frames. Images must be at least 11x11.
double ssim(const Tensor5D& pred, const Tensor5D& gt,
            double dynamic_range = 2048.0);

/// (mean over blood mask - mean over myocardium mask) / sigma.
double cnr(const Tensor5D& img, const Tensor5D& blood_mask,
           const Tensor5D& myo_mask, double sigma);

/// diffs = a - b; mean deviation and 90% confidence-range width
/// 2 * 1.645 * SD(diffs) (sample SD, n-1 denominator).
BlandAltmanResult bland_altman(const std::vector<double>& a,
                               const std::vector<double>& b);

/// Mean of img over the nonzero entries of mask (all frames pooled).
double masked_mean(const Tensor5D& img, const Tensor5D& mask);

}  // namespace itx
