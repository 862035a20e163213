#include "hat/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <ostream>

#include "hat/tensor.hpp"

namespace hat {

// ====== Config ======

Phase phase_from_string(const std::string& s) {
  if (s == "scratch") return Phase::scratch;
  if (s == "pretrain") return Phase::pretrain;
  if (s == "finetune") return Phase::finetune;
  throw ConfigError("unknown phase '" + s +
                    "' (expected scratch, pretrain or finetune)");
}

std::string phase_to_string(Phase phase) {
  switch (phase) {
    case Phase::scratch:
      return "scratch";
    case Phase::pretrain:
      return "pretrain";
    case Phase::finetune:
      return "finetune";
  }
  throw InternalError("phase_to_string: bad enum value");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (patch_size < 1) throw ConfigError("patch_size must be at least 1");
  if (total_iters < 1) throw ConfigError("total_iters must be at least 1");
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (log_every < 1) throw ConfigError("log_every must be at least 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) ||
      !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 1 || milestones[i] >= total_iters) {
      throw ConfigError("milestones must lie in [1, total_iters)");
    }
    if (i > 0 && milestones[i] <= milestones[i - 1]) {
      throw ConfigError("milestones must be strictly increasing");
    }
  }
  if (phase == Phase::finetune && init_checkpoint.empty()) {
    throw ConfigError("finetune phase requires init_checkpoint");
  }
}

TrainConfig TrainConfig::defaults_for(Phase phase) {
  TrainConfig cfg;
  cfg.phase = phase;
  switch (phase) {
    case Phase::scratch:
      cfg.total_iters = 500000;
      cfg.base_lr = 2e-4;
      cfg.milestones = {250000, 400000, 450000, 475000};
      break;
    case Phase::pretrain:
      cfg.total_iters = 800000;
      cfg.base_lr = 2e-4;
      cfg.milestones = {300000, 500000, 650000, 700000, 750000};
      break;
    case Phase::finetune:
      cfg.total_iters = 250000;
      cfg.base_lr = 1e-5;
      cfg.milestones = {125000, 200000, 230000, 240000};
      break;
  }
  return cfg;
}

double lr_at(std::int64_t iter, const TrainConfig& cfg) {
  int halvings = 0;
  for (std::int64_t m : cfg.milestones) {
    if (m <= iter) ++halvings;
  }
  return std::ldexp(cfg.base_lr, -halvings);
}

// ====== Adam ======

AdamState AdamState::create(const ParamTree& params) {
  AdamState state;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const auto& [name, t] : params) {
    state.m.push_back(Tensor::zeros(t.shape()));
    state.v.push_back(Tensor::zeros(t.shape()));
  }
  return state;
}

void adam_step(ParamTree& params, AdamState& state, double lr,
               const TrainConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw InternalError("adam state does not mirror the parameter tree");
  }
  state.t += 1;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  std::size_t i = 0;
  for (auto& [name, t] : params) {
    Tensor p = t;
    Tensor m = state.m[i];
    Tensor v = state.v[i];
    ++i;
    real* pd = p.data();
    real* md = m.data();
    real* vd = v.data();
    const real* gd = p.has_grad() ? p.grad_data() : nullptr;
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      const double g = gd != nullptr ? static_cast<double>(gd[j]) : 0.0;
      if (!std::isfinite(g)) {
        throw NumericError("adam_step: non-finite gradient in " + name);
      }
      const double mj = b1 * md[j] + (1.0 - b1) * g;
      const double vj = b2 * vd[j] + (1.0 - b2) * g * g;
      md[j] = static_cast<real>(mj);
      vd[j] = static_cast<real>(vj);
      const double update =
          lr * (mj / corr1) / (std::sqrt(vj / corr2) + cfg.adam_eps);
      pd[j] = static_cast<real>(static_cast<double>(pd[j]) - update);
    }
  }
}

void clip_gradients(ParamTree& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("max_norm must be positive");
  double sq = 0.0;
  for (auto& [name, t] : params) {
    Tensor p = t;
    if (!p.has_grad()) continue;
    const real* gd = p.grad_data();
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      sq += static_cast<double>(gd[j]) * static_cast<double>(gd[j]);
    }
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double factor = max_norm / norm;
  for (auto& [name, t] : params) {
    Tensor p = t;
    if (!p.has_grad()) continue;
    real* gd = p.grad_data();
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      gd[j] = static_cast<real>(gd[j] * factor);
    }
  }
}

// ====== Bicubic resampling ======

namespace {

double cubic_kernel(double x) {
  const double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

// Symmetric extension: indices reflect at the edges with the border pixel
// repeated (... 1 0 | 0 1 ... n-1 | n-1 n-2 ...).
std::int64_t mirror_index(std::int64_t i, std::int64_t n) {
  const std::int64_t period = 2 * n;
  std::int64_t m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

std::int64_t output_length(std::int64_t in_len, double scale) {
  const double v = static_cast<double>(in_len) * scale;
  const double r = std::round(v);
  const std::int64_t out = static_cast<std::int64_t>(
      std::abs(v - r) < 1e-9 ? r : std::ceil(v));
  if (out < 1) {
    throw ShapeError("bicubic_resize: output size would be empty");
  }
  return out;
}

// Precomputed source indices and normalized weights for one axis.
struct ResamplePlan {
  std::int64_t out_len = 0;
  std::int64_t taps = 0;
  std::vector<std::int64_t> index;  // out_len * taps, edge-folded
  std::vector<double> weight;       // out_len * taps, rows sum to 1
};

ResamplePlan plan_axis(std::int64_t in_len, double scale, bool antialias) {
  ResamplePlan plan;
  plan.out_len = output_length(in_len, scale);
  // Shrinking with antialias stretches the kernel by 1/scale and scales its
  // amplitude to keep unit area.
  const double k_scale = (scale < 1.0 && antialias) ? scale : 1.0;
  const double width = 4.0 / k_scale;
  plan.taps = static_cast<std::int64_t>(std::ceil(width)) + 2;
  plan.index.resize(plan.out_len * plan.taps);
  plan.weight.resize(plan.out_len * plan.taps);
  for (std::int64_t x = 0; x < plan.out_len; ++x) {
    // Center of output pixel x in input coordinates.
    const double u = (static_cast<double>(x) + 0.5) / scale - 0.5;
    const std::int64_t left =
        static_cast<std::int64_t>(std::floor(u - width / 2.0));
    double sum = 0.0;
    for (std::int64_t t = 0; t < plan.taps; ++t) {
      const double w =
          k_scale * cubic_kernel(k_scale * (u - static_cast<double>(left + t)));
      plan.weight[x * plan.taps + t] = w;
      plan.index[x * plan.taps + t] = mirror_index(left + t, in_len);
      sum += w;
    }
    for (std::int64_t t = 0; t < plan.taps; ++t) {
      plan.weight[x * plan.taps + t] /= sum;
    }
  }
  return plan;
}

}  // namespace

Tensor bicubic_resize(const Tensor& img, double scale, bool antialias) {
  if (!(scale > 0.0)) throw ConfigError("bicubic_resize: scale must be positive");
  if (img.ndim() < 2) {
    throw ShapeError("bicubic_resize: need at least 2 dimensions, got " +
                     shape_str(img.shape()));
  }
  const std::int64_t h = img.dim(-2);
  const std::int64_t w = img.dim(-1);
  const std::int64_t batch = img.numel() / (h * w);
  const ResamplePlan rows = plan_axis(h, scale, antialias);
  const ResamplePlan cols = plan_axis(w, scale, antialias);

  const real* src = img.data();
  // Pass 1: resample rows, [batch, h, w] -> [batch, oh, w] in doubles.
  std::vector<double> mid(batch * rows.out_len * w);
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t y = 0; y < rows.out_len; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::int64_t t = 0; t < rows.taps; ++t) {
          const std::int64_t sy = rows.index[y * rows.taps + t];
          acc += rows.weight[y * rows.taps + t] *
                 static_cast<double>(src[(b * h + sy) * w + x]);
        }
        mid[(b * rows.out_len + y) * w + x] = acc;
      }
    }
  }
  // Pass 2: resample columns.
  std::vector<std::int64_t> out_shape = img.shape();
  out_shape[img.ndim() - 2] = rows.out_len;
  out_shape[img.ndim() - 1] = cols.out_len;
  Tensor out(out_shape);
  real* dst = out.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t y = 0; y < rows.out_len; ++y) {
      for (std::int64_t x = 0; x < cols.out_len; ++x) {
        double acc = 0.0;
        for (std::int64_t t = 0; t < cols.taps; ++t) {
          const std::int64_t sx = cols.index[x * cols.taps + t];
          acc += cols.weight[x * cols.taps + t] *
                 mid[(b * rows.out_len + y) * w + sx];
        }
        dst[(b * rows.out_len + y) * cols.out_len + x] =
            static_cast<real>(acc);
      }
    }
  }
  return out;
}

// ====== Augmentation ======

namespace {

void expect_chw(const Tensor& img, const char* who) {
  if (img.ndim() != 3) {
    throw ShapeError(std::string(who) + ": expected [C, H, W], got " +
                     shape_str(img.shape()));
  }
}

}  // namespace

Tensor rot90(const Tensor& img, std::int64_t k) {
  expect_chw(img, "rot90");
  k = ((k % 4) + 4) % 4;
  Tensor cur = img;
  for (std::int64_t step = 0; step < k; ++step) {
    const std::int64_t c = cur.dim(0), h = cur.dim(1), w = cur.dim(2);
    Tensor next({c, w, h});
    const real* s = cur.data();
    real* d = next.data();
    // One quarter-turn counter-clockwise: out[y][x] = in[x][w-1-y].
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < w; ++y) {
        for (std::int64_t x = 0; x < h; ++x) {
          d[(ch * w + y) * h + x] = s[(ch * h + x) * w + (w - 1 - y)];
        }
      }
    }
    cur = next;
  }
  return k == 0 ? img.detach_copy() : cur;
}

Tensor hflip(const Tensor& img) {
  expect_chw(img, "hflip");
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out({c, h, w});
  const real* s = img.data();
  real* d = out.data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        d[(ch * h + y) * w + x] = s[(ch * h + y) * w + (w - 1 - x)];
      }
    }
  }
  return out;
}

// ====== Patch sampling ======

namespace {

Tensor crop_chw(const Tensor& img, std::int64_t oy, std::int64_t ox,
                std::int64_t size) {
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out({c, size, size});
  const real* s = img.data();
  real* d = out.data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t y = 0; y < size; ++y) {
      std::memcpy(d + (ch * size + y) * size,
                  s + (ch * h + oy + y) * w + ox,
                  sizeof(real) * static_cast<std::size_t>(size));
    }
  }
  return out;
}

}  // namespace

std::pair<Tensor, Tensor> sample_batch(const std::vector<Tensor>& dataset_hr,
                                       std::int64_t patch, std::int64_t scale,
                                       std::int64_t batch, Rng& rng) {
  if (dataset_hr.empty()) throw UsageError("sample_batch: dataset is empty");
  if (patch < 1 || scale < 1 || batch < 1) {
    throw ConfigError("sample_batch: patch, scale and batch must be positive");
  }
  const std::int64_t hr_patch = patch * scale;
  const std::int64_t channels = dataset_hr[0].dim(0);
  Tensor lr_b({batch, channels, patch, patch});
  Tensor hr_b({batch, channels, hr_patch, hr_patch});
  for (std::int64_t b = 0; b < batch; ++b) {
    // Redraw until a large enough image comes up.
    Tensor img;
    for (std::int64_t attempt = 0;; ++attempt) {
      const std::int64_t idx =
          rng.randint(0, static_cast<std::int64_t>(dataset_hr.size()));
      const Tensor& cand = dataset_hr[idx];
      expect_chw(cand, "sample_batch");
      if (cand.dim(0) != channels) {
        throw ShapeError("sample_batch: images disagree on channel count");
      }
      if (cand.dim(1) >= hr_patch && cand.dim(2) >= hr_patch) {
        img = cand;
        break;
      }
      std::cerr << "warning: image " << idx << " is smaller than " << hr_patch
                << "x" << hr_patch << ", skipped\n";
      if (attempt > 100 * static_cast<std::int64_t>(dataset_hr.size())) {
        throw UsageError("sample_batch: no image fits a " +
                         std::to_string(hr_patch) + "-pixel crop");
      }
    }
    // Crop offsets stay on the scale grid so the patch corresponds to whole
    // LR pixels.
    const std::int64_t oy =
        rng.randint(0, (img.dim(1) - hr_patch) / scale + 1) * scale;
    const std::int64_t ox =
        rng.randint(0, (img.dim(2) - hr_patch) / scale + 1) * scale;
    Tensor hr = crop_chw(img, oy, ox, hr_patch);
    const std::int64_t rot_k = rng.randint(0, 4);
    const bool flip = rng.randint(0, 2) == 1;
    if (flip) hr = hflip(hr);
    hr = rot90(hr, rot_k);
    // Degrading the augmented patch keeps the LR/HR pair exactly consistent.
    Tensor lr = bicubic_resize(hr, 1.0 / static_cast<double>(scale), true);
    std::memcpy(hr_b.data() + b * channels * hr_patch * hr_patch, hr.data(),
                sizeof(real) *
                    static_cast<std::size_t>(channels * hr_patch * hr_patch));
    std::memcpy(lr_b.data() + b * channels * patch * patch, lr.data(),
                sizeof(real) * static_cast<std::size_t>(channels * patch * patch));
  }
  return {lr_b, hr_b};
}

// ====== Training loop ======

TrainResult train_loop(HatModel& model, const std::vector<Tensor>& dataset_hr,
                       const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  const std::int64_t scale = model.config().scale;
  const std::int64_t hr_patch = cfg.patch_size * scale;
  // Filter up front so an undersized image warns once, not every draw.
  std::vector<Tensor> usable;
  usable.reserve(dataset_hr.size());
  for (std::size_t i = 0; i < dataset_hr.size(); ++i) {
    const Tensor& img = dataset_hr[i];
    if (img.ndim() == 3 && img.dim(1) >= hr_patch && img.dim(2) >= hr_patch) {
      usable.push_back(img);
    } else {
      std::cerr << "warning: training image " << i << " is smaller than "
                << hr_patch << "x" << hr_patch << " and will be skipped\n";
    }
  }
  if (usable.empty()) {
    throw UsageError("train_loop: no training image fits a " +
                     std::to_string(hr_patch) + "-pixel crop");
  }

  ParamTree params = model.params();
  AdamState state = AdamState::create(params);
  Rng rng(static_cast<std::uint64_t>(cfg.seed));
  TrainResult result;
  result.losses.reserve(cfg.total_iters);
  std::size_t next_milestone = 0;
  for (std::int64_t iter = 0; iter < cfg.total_iters; ++iter) {
    const double lr = lr_at(iter, cfg);
    auto [lr_batch, hr_batch] =
        sample_batch(usable, cfg.patch_size, scale, cfg.batch_size, rng);
    double loss_value = 0.0;
    {
      Tape tape;
      Tensor pred = model.forward(lr_batch);
      Tensor loss = l1_loss(pred, hr_batch);
      loss_value = static_cast<double>(loss.item());
      for (auto& [name, t] : params) {
        Tensor p = t;
        p.zero_grad();
      }
      tape.backward(loss);
    }
    if (!std::isfinite(loss_value)) {
      throw NumericError("train_loop: loss became non-finite at iter " +
                         std::to_string(iter));
    }
    if (cfg.grad_clip > 0.0) clip_gradients(params, cfg.grad_clip);
    adam_step(params, state, lr, cfg);
    result.losses.push_back(loss_value);
    result.iters_run = iter + 1;
    if (hooks.log != nullptr &&
        (iter % cfg.log_every == 0 || iter + 1 == cfg.total_iters)) {
      (*hooks.log) << iter << '\t' << lr << '\t' << loss_value << '\n';
    }
    if (next_milestone < cfg.milestones.size() &&
        iter + 1 == cfg.milestones[next_milestone]) {
      ++next_milestone;
      if (hooks.save) hooks.save(iter + 1, "milestone");
    }
  }
  if (hooks.save) hooks.save(cfg.total_iters, "final");
  return result;
}

}  // namespace hat
