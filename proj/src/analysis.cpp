#include "hat/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <vector>

#include "hat/io.hpp"

namespace hat {

namespace {

// BT.601 studio-swing luma coefficients, scaled by 1000 so that the black and
// white endpoints land exactly on 16 and 235.
constexpr double kYr = 65481.0;
constexpr double kYg = 128553.0;
constexpr double kYb = 24966.0;

// Half-sample symmetric reflection: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
std::int64_t mirror_idx(std::int64_t i, std::int64_t n) {
  const std::int64_t period = 2 * n;
  std::int64_t m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

void check_plane_pair(const Tensor& a, const Tensor& b, std::int64_t crop,
                      const char* op) {
  if (!a.defined() || !b.defined()) {
    throw InternalError(std::string(op) + ": undefined tensor");
  }
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.ndim() < 2) {
    throw ShapeError(std::string(op) + ": need at least 2 dims, got " +
                     shape_str(a.shape()));
  }
  if (crop < 0) {
    throw UsageError(std::string(op) + ": negative crop");
  }
}

// 1-D normalized Gaussian taps.
std::vector<double> gaussian_taps(std::int64_t size, double sigma) {
  std::vector<double> taps(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double total = 0.0;
  for (std::int64_t i = 0; i < size; ++i) {
    taps[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    total += taps[i];
  }
  for (double& t : taps) t /= total;
  return taps;
}

// Valid-mode separable filtering of an h x w double plane: the output keeps
// only positions where the full window fits.
std::vector<double> filter_valid(const std::vector<double>& plane,
                                 std::int64_t h, std::int64_t w,
                                 const std::vector<double>& taps) {
  const std::int64_t k = static_cast<std::int64_t>(taps.size());
  const std::int64_t wv = w - k + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * wv));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < wv; ++x) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < k; ++i) acc += taps[i] * plane[y * w + x + i];
      rows[y * wv + x] = acc;
    }
  }
  const std::int64_t hv = h - k + 1;
  std::vector<double> out(static_cast<std::size_t>(hv * wv));
  for (std::int64_t y = 0; y < hv; ++y) {
    for (std::int64_t x = 0; x < wv; ++x) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < k; ++i) acc += taps[i] * rows[(y + i) * wv + x];
      out[y * wv + x] = acc;
    }
  }
  return out;
}

}  // namespace

Tensor rgb_to_y(const Tensor& img) {
  if (!img.defined() || img.ndim() != 3 || img.dim(0) != 3) {
    throw ShapeError("rgb_to_y: expected [3,H,W], got " +
                     (img.defined() ? shape_str(img.shape()) : "undefined"));
  }
  const std::int64_t h = img.dim(1), w = img.dim(2), plane = h * w;
  Tensor y({h, w});
  const real* p = img.data();
  for (std::int64_t i = 0; i < plane; ++i) {
    const double v = (kYr * p[i] + kYg * p[plane + i] + kYb * p[2 * plane + i]) /
                         1000.0 +
                     16.0;
    y.data()[i] = static_cast<real>(v);
  }
  return y;
}

double psnr(const Tensor& a, const Tensor& b, double peak, std::int64_t crop) {
  check_plane_pair(a, b, crop, "psnr");
  const std::int64_t h = a.dim(-2), w = a.dim(-1);
  if (h - 2 * crop <= 0 || w - 2 * crop <= 0) {
    throw UsageError("psnr: crop " + std::to_string(crop) +
                     " leaves no pixels of a " + std::to_string(h) + "x" +
                     std::to_string(w) + " plane");
  }
  const std::int64_t planes = a.numel() / (h * w);
  double sq = 0.0;
  std::int64_t count = 0;
  for (std::int64_t p = 0; p < planes; ++p) {
    const real* pa = a.data() + p * h * w;
    const real* pb = b.data() + p * h * w;
    for (std::int64_t y = crop; y < h - crop; ++y) {
      for (std::int64_t x = crop; x < w - crop; ++x) {
        const double d = static_cast<double>(pa[y * w + x]) -
                         static_cast<double>(pb[y * w + x]);
        sq += d * d;
        ++count;
      }
    }
  }
  const double mse = sq / static_cast<double>(count);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const Tensor& a, const Tensor& b, std::int64_t crop) {
  check_plane_pair(a, b, crop, "ssim");
  if (a.ndim() != 2) {
    throw ShapeError("ssim: expected [H,W], got " + shape_str(a.shape()));
  }
  constexpr std::int64_t kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double kC1 = (0.01 * 255.0) * (0.01 * 255.0);
  constexpr double kC2 = (0.03 * 255.0) * (0.03 * 255.0);
  const std::int64_t h = a.dim(0) - 2 * crop, w = a.dim(1) - 2 * crop;
  if (h < kWin || w < kWin) {
    throw UsageError("ssim: plane is " + std::to_string(h) + "x" +
                     std::to_string(w) + " after cropping, need at least " +
                     std::to_string(kWin) + "x" + std::to_string(kWin));
  }

  const std::int64_t n = h * w;
  std::vector<double> pa(static_cast<std::size_t>(n)),
      pb(static_cast<std::size_t>(n)), paa(static_cast<std::size_t>(n)),
      pbb(static_cast<std::size_t>(n)), pab(static_cast<std::size_t>(n));
  const std::int64_t full_w = a.dim(1);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const double va = a.data()[(y + crop) * full_w + (x + crop)];
      const double vb = b.data()[(y + crop) * full_w + (x + crop)];
      pa[y * w + x] = va;
      pb[y * w + x] = vb;
      paa[y * w + x] = va * va;
      pbb[y * w + x] = vb * vb;
      pab[y * w + x] = va * vb;
    }
  }

  const std::vector<double> taps = gaussian_taps(kWin, kSigma);
  const std::vector<double> ma = filter_valid(pa, h, w, taps);
  const std::vector<double> mb = filter_valid(pb, h, w, taps);
  const std::vector<double> maa = filter_valid(paa, h, w, taps);
  const std::vector<double> mbb = filter_valid(pbb, h, w, taps);
  const std::vector<double> mab = filter_valid(pab, h, w, taps);

  double total = 0.0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const double mu_a = ma[i], mu_b = mb[i];
    const double var_a = maa[i] - mu_a * mu_a;
    const double var_b = mbb[i] - mu_b * mu_b;
    const double cov = mab[i] - mu_a * mu_b;
    const double num = (2.0 * mu_a * mu_b + kC1) * (2.0 * cov + kC2);
    const double den =
        (mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2);
    total += num / den;
  }
  return total / static_cast<double>(ma.size());
}

MetricResult evaluate_pair(const Tensor& sr, const Tensor& hr,
                           std::int64_t crop) {
  if (!sr.defined() || !hr.defined() || sr.ndim() != 3 || sr.dim(0) != 3) {
    throw ShapeError("evaluate_pair: expected [3,H,W] images");
  }
  if (sr.shape() != hr.shape()) {
    throw UsageError("evaluate_pair: image sizes differ, " +
                     shape_str(sr.shape()) + " vs " + shape_str(hr.shape()));
  }
  const Tensor ya = rgb_to_y(sr);
  const Tensor yb = rgb_to_y(hr);
  MetricResult r;
  r.psnr_db = psnr(ya, yb, 255.0, crop);
  r.ssim = ssim(ya, yb, crop);
  r.crop_border = crop;
  r.channel = "Y";
  return r;
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
  if (!img.defined() || img.ndim() < 2) {
    throw ShapeError("gaussian_blur: need at least 2 dims");
  }
  if (!(sigma > 0.0)) {
    throw UsageError("gaussian_blur: sigma must be positive");
  }
  std::int64_t size = static_cast<std::int64_t>(std::ceil(4.0 * sigma));
  if (size % 2 == 0) ++size;
  const std::vector<double> taps = gaussian_taps(size, sigma);
  const std::int64_t half = size / 2;

  const std::int64_t h = img.dim(-2), w = img.dim(-1);
  const std::int64_t planes = img.numel() / (h * w);
  Tensor out(img.shape());
  std::vector<double> rows(static_cast<std::size_t>(h * w));
  for (std::int64_t p = 0; p < planes; ++p) {
    const real* src = img.data() + p * h * w;
    real* dst = out.data() + p * h * w;
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::int64_t i = -half; i <= half; ++i) {
          acc += taps[i + half] * src[y * w + mirror_idx(x + i, w)];
        }
        rows[y * w + x] = acc;
      }
    }
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::int64_t i = -half; i <= half; ++i) {
          acc += taps[i + half] * rows[mirror_idx(y + i, h) * w + x];
        }
        dst[y * w + x] = static_cast<real>(acc);
      }
    }
  }
  return out;
}

AttributionMap lam_attribute(
    const std::function<Tensor(const Tensor&)>& sr_forward, std::int64_t scale,
    const Tensor& lr_img, const LamOptions& opts) {
  if (!lr_img.defined() || lr_img.ndim() != 3 || lr_img.dim(0) != 3) {
    throw ShapeError("lam_attribute: expected a [3,H,W] input");
  }
  if (scale < 1) throw ConfigError("lam_attribute: scale must be >= 1");
  const std::int64_t h = lr_img.dim(1), w = lr_img.dim(2);
  const std::int64_t sh = h * scale, sw = w * scale;
  if (opts.w < 1 || opts.h < 1) {
    throw UsageError("lam_attribute: target patch is degenerate (" +
                     std::to_string(opts.w) + "x" + std::to_string(opts.h) +
                     ")");
  }
  if (opts.x < 0 || opts.y < 0 || opts.x + opts.w > sw ||
      opts.y + opts.h > sh) {
    throw UsageError("lam_attribute: patch exceeds the " + std::to_string(sw) +
                     "x" + std::to_string(sh) + " output");
  }
  if (opts.steps < 2) {
    throw UsageError("lam_attribute: need at least 2 path steps");
  }

  const Tensor baseline = gaussian_blur(lr_img, opts.sigma);
  const std::int64_t n = lr_img.numel();
  std::vector<double> diff(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    diff[i] = static_cast<double>(lr_img.data()[i]) -
              static_cast<double>(baseline.data()[i]);
  }

  // Per-channel luma weights; the +16 offset per pixel is constant along the
  // path, so it only shifts the reported targets, never the gradients.
  const Tensor luma_w = Tensor::from_data(
      {3, 1, 1}, {static_cast<real>(kYr / 1000.0),
                  static_cast<real>(kYg / 1000.0),
                  static_cast<real>(kYb / 1000.0)});
  const double target_offset = 16.0 * static_cast<double>(opts.w * opts.h);

  AttributionMap map;
  map.patch_x = opts.x;
  map.patch_y = opts.y;
  map.patch_w = opts.w;
  map.patch_h = opts.h;
  map.steps = opts.steps;
  map.baseline_sigma = opts.sigma;

  std::vector<double> grad_acc(static_cast<std::size_t>(n), 0.0);
  for (int k = 0; k < opts.steps; ++k) {
    const double t = static_cast<double>(k) / (opts.steps - 1);
    Tensor leaf({1, 3, h, w}, /*requires_grad=*/true);
    for (std::int64_t i = 0; i < n; ++i) {
      leaf.data()[i] =
          static_cast<real>(static_cast<double>(baseline.data()[i]) + t * diff[i]);
    }
    Tape tape;
    Tensor sr = sr_forward(leaf);
    const std::vector<std::int64_t> want{1, 3, sh, sw};
    if (sr.shape() != want) {
      throw ShapeError("lam_attribute: forward returned " +
                       shape_str(sr.shape()) + ", expected " + shape_str(want));
    }
    Tensor patch = slice(sr, {0, 0, opts.y, opts.x},
                         {1, 3, opts.y + opts.h, opts.x + opts.w});
    Tensor target = sum_all(mul(patch, luma_w));
    const double value = static_cast<double>(target.item()) + target_offset;
    if (k == 0) map.target_baseline = value;
    if (k == opts.steps - 1) map.target_input = value;
    tape.backward(target);
    const std::vector<real>& g = leaf.grad();
    if (!g.empty()) {
      for (std::int64_t i = 0; i < n; ++i) grad_acc[i] += g[i];
    }
  }

  const std::int64_t plane = h * w;
  map.saliency = Tensor({h, w});
  double signed_total = 0.0;
  for (std::int64_t i = 0; i < plane; ++i) {
    double mag = 0.0;
    for (std::int64_t c = 0; c < 3; ++c) {
      const double attribution =
          diff[c * plane + i] * (grad_acc[c * plane + i] / opts.steps);
      signed_total += attribution;
      mag += std::abs(attribution);
    }
    if (!std::isfinite(mag)) {
      throw NumericError("lam_attribute: non-finite attribution");
    }
    map.saliency.data()[i] = static_cast<real>(mag);
  }
  map.attribution_total = signed_total;

  double peak = 0.0;
  for (std::int64_t i = 0; i < plane; ++i) {
    peak = std::max(peak, static_cast<double>(map.saliency.data()[i]));
  }
  map.di = peak > 0.0 ? diffusion_index(map.saliency) : 0.0;
  return map;
}

AttributionMap lam_attribute(const HatModel& model, const Tensor& lr_img,
                             const LamOptions& opts) {
  const auto fn = [&model](const Tensor& x) { return model.forward(x); };
  return lam_attribute(fn, model.config().scale, lr_img, opts);
}

double diffusion_index(const Tensor& saliency) {
  if (!saliency.defined() || saliency.numel() == 0) {
    throw ShapeError("diffusion_index: empty map");
  }
  const std::int64_t n = saliency.numel();
  std::vector<double> v(static_cast<std::size_t>(n));
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    v[i] = std::abs(static_cast<double>(saliency.data()[i]));
    total += v[i];
  }
  if (total == 0.0) {
    throw UsageError("diffusion_index: map is identically zero");
  }
  std::sort(v.begin(), v.end());
  double weighted = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    weighted += static_cast<double>(i + 1) * v[i];
  }
  const double gini = (2.0 * weighted) / (static_cast<double>(n) * total) -
                      static_cast<double>(n + 1) / static_cast<double>(n);
  const double di = 100.0 * (1.0 - gini);
  return std::min(100.0, std::max(0.0, di));
}

std::vector<std::string> dump_features(const HatModel& model,
                                       const Tensor& lr_img, int after_group,
                                       const std::string& out_dir,
                                       const std::string& prefix) {
  if (!lr_img.defined() || lr_img.ndim() != 3 || lr_img.dim(0) != 3) {
    throw ShapeError("dump_features: expected a [3,H,W] input");
  }
  if (after_group < 1 ||
      after_group > static_cast<int>(model.config().num_rhag)) {
    throw UsageError("dump_features: group " + std::to_string(after_group) +
                     " out of range 1.." +
                     std::to_string(model.config().num_rhag));
  }
  const std::int64_t h = lr_img.dim(1), w = lr_img.dim(2);
  Tensor input({1, 3, h, w});
  std::copy(lr_img.data(), lr_img.data() + lr_img.numel(), input.data());

  Tensor captured;
  model.forward(input, after_group, &captured);
  const std::int64_t c = captured.dim(1);
  const std::int64_t plane = h * w;

  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;
  const auto normalize = [plane](const double* src, Tensor& out) {
    double lo = src[0], hi = src[0];
    for (std::int64_t i = 1; i < plane; ++i) {
      lo = std::min(lo, src[i]);
      hi = std::max(hi, src[i]);
    }
    for (std::int64_t i = 0; i < plane; ++i) {
      out.data()[i] = static_cast<real>(
          hi > lo ? (src[i] - lo) / (hi - lo) : 0.5);
    }
  };

  std::vector<double> buf(static_cast<std::size_t>(plane));
  Tensor gray({h, w});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const real* src = captured.data() + ch * plane;
    for (std::int64_t i = 0; i < plane; ++i) buf[i] = src[i];
    normalize(buf.data(), gray);
    char name[32];
    std::snprintf(name, sizeof(name), "_c%03lld.png",
                  static_cast<long long>(ch));
    const std::string path =
        (std::filesystem::path(out_dir) / (prefix + name)).string();
    save_gray_png(gray, path);
    written.push_back(path);
  }

  std::vector<double> mean(static_cast<std::size_t>(plane), 0.0);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const real* src = captured.data() + ch * plane;
    for (std::int64_t i = 0; i < plane; ++i) mean[i] += src[i];
  }
  for (std::int64_t i = 0; i < plane; ++i) mean[i] /= static_cast<double>(c);
  normalize(mean.data(), gray);
  const std::string mean_path =
      (std::filesystem::path(out_dir) / (prefix + "_mean.png")).string();
  save_gray_png(gray, mean_path);
  written.push_back(mean_path);
  return written;
}

}  // namespace hat
