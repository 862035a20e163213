#pragma once

// Evaluation and inspection utilities: Y-channel PSNR/SSIM, integrated-
// gradient attribution maps with a diffusion index, and grayscale dumps of
// intermediate feature maps.

#include <functional>
#include <string>
#include <vector>

#include "hat/model.hpp"

namespace hat {

// Attribution over the low-resolution input for one super-resolved patch.
struct AttributionMap {
  Tensor saliency;       // [H, W] over the LR input, per-pixel |attribution|
  double di = 0.0;       // diffusion index in [0, 100]
  std::int64_t patch_x = 0, patch_y = 0;  // target patch, SR coordinates
  std::int64_t patch_w = 0, patch_h = 0;
  int steps = 0;
  double baseline_sigma = 0.0;
  // Bookkeeping for the completeness identity: the signed attribution total
  // should approach target_input - target_baseline as steps grows.
  double attribution_total = 0.0;
  double target_input = 0.0;
  double target_baseline = 0.0;
};

struct MetricResult {
  double psnr_db = 0.0;
  double ssim = 0.0;
  std::int64_t crop_border = 0;
  std::string channel;  // "Y" or "RGB"
};

// [3,H,W] in [0,1] -> [H,W] luma in [16,235] (BT.601 studio swing, the
// convention the SR literature reports against).
Tensor rgb_to_y(const Tensor& img);

// 10*log10(peak^2 / MSE) over the planes with `crop` pixels shaved off every
// border first.  Identical planes return +infinity.
double psnr(const Tensor& a, const Tensor& b, double peak = 255.0,
            std::int64_t crop = 0);

// Mean local SSIM with the standard 11x11 Gaussian window (sigma 1.5,
// K1=0.01, K2=0.03, L=255), windows fully inside the cropped planes.
double ssim(const Tensor& a, const Tensor& b, std::int64_t crop = 0);

// Y-channel PSNR + SSIM of two same-shape [3,H,W] images.
MetricResult evaluate_pair(const Tensor& sr, const Tensor& hr,
                           std::int64_t crop);

// Gaussian blur of every [H,W] plane of a [...,H,W] tensor; kernel size is
// 4*sigma rounded up to the next odd integer, borders mirror.
Tensor gaussian_blur(const Tensor& img, double sigma);

struct LamOptions {
  std::int64_t x = 0, y = 0;  // target patch, SR coordinates
  std::int64_t w = 0, h = 0;
  int steps = 32;
  double sigma = 4.0;  // blur of the baseline image
};

// Integrated gradients along the straight path from a blurred baseline to the
// input, scored on the summed Y value of the target SR patch.  `sr_forward`
// must map [1,3,H,W] -> [1,3,H*scale,W*scale] using traced tensor ops.
AttributionMap lam_attribute(
    const std::function<Tensor(const Tensor&)>& sr_forward, std::int64_t scale,
    const Tensor& lr_img, const LamOptions& opts);

AttributionMap lam_attribute(const HatModel& model, const Tensor& lr_img,
                             const LamOptions& opts);

// 100 * (1 - Gini coefficient) of the absolute values: 100 for a perfectly
// even map, ~0 when all mass sits in one pixel.
double diffusion_index(const Tensor& saliency);

// Runs the model on [3,H,W], captures the features after the given group
// (1-based), and writes per-channel min-max grayscale images plus a
// channel-mean image into out_dir.  Returns the written paths.
std::vector<std::string> dump_features(const HatModel& model,
                                       const Tensor& lr_img, int after_group,
                                       const std::string& out_dir,
                                       const std::string& prefix = "feat");

}  // namespace hat
