#include "hat/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

using hat::real;
using hat::Rng;
using hat::Tensor;

namespace {

Tensor random_image(std::vector<std::int64_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t.data()[i] = static_cast<real>(rng.uniform(0.0, 1.0));
  }
  return t;
}

hat::ModelConfig tiny_model_config() {
  hat::ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_rhag = 1;
  cfg.habs_per_rhag = 2;
  cfg.window_size = 4;
  cfg.num_heads = 2;
  cfg.cab_beta = 2;
  cfg.scale = 2;
  cfg.recon_feat = 8;
  return cfg;
}

// ---- independent bicubic reference: one output sample via a direct 2-D
// accumulation over the source, kernel maths written out from the definition.

double ref_cubic(double x) {
  x = std::abs(x);
  const double a = -0.5;
  if (x <= 1.0) return 1.0 + x * x * ((a + 3.0) * (-1.0) + (a + 2.0) * x);
  if (x < 2.0) return a * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0);
  return 0.0;
}

std::int64_t ref_mirror(std::int64_t i, std::int64_t n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -1 - i;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

void ref_axis_weights(std::int64_t pos, double scale, bool antialias,
                      std::int64_t in_len, std::vector<std::int64_t>& idx,
                      std::vector<double>& wt) {
  const double u = (pos + 0.5) / scale - 0.5;
  const bool shrink = scale < 1.0 && antialias;
  const double support = shrink ? 4.0 / scale : 4.0;
  const std::int64_t first =
      static_cast<std::int64_t>(std::floor(u - support / 2.0));
  const std::int64_t count =
      static_cast<std::int64_t>(std::ceil(support)) + 2;
  idx.clear();
  wt.clear();
  double total = 0.0;
  for (std::int64_t t = 0; t < count; ++t) {
    const double d = u - static_cast<double>(first + t);
    const double w = shrink ? scale * ref_cubic(scale * d) : ref_cubic(d);
    idx.push_back(ref_mirror(first + t, in_len));
    wt.push_back(w);
    total += w;
  }
  for (double& w : wt) w /= total;
}

double ref_resize_at(const std::vector<double>& img, std::int64_t h,
                     std::int64_t w, double scale, bool antialias,
                     std::int64_t oy, std::int64_t ox) {
  std::vector<std::int64_t> iy, ix;
  std::vector<double> wy, wx;
  ref_axis_weights(oy, scale, antialias, h, iy, wy);
  ref_axis_weights(ox, scale, antialias, w, ix, wx);
  double acc = 0.0;
  for (std::size_t a = 0; a < iy.size(); ++a) {
    for (std::size_t b = 0; b < ix.size(); ++b) {
      acc += wy[a] * wx[b] * img[iy[a] * w + ix[b]];
    }
  }
  return acc;
}

Tensor copy_sample(const Tensor& batch, std::int64_t b) {
  const std::int64_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor out({c, h, w});
  std::memcpy(out.data(), batch.data() + b * c * h * w,
              sizeof(real) * static_cast<std::size_t>(c * h * w));
  return out;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("train: learning rate halves at every milestone") {
  hat::TrainConfig cfg;  // published scratch schedule
  CHECK(hat::lr_at(0, cfg) == 2e-4);
  CHECK(hat::lr_at(249999, cfg) == 2e-4);
  CHECK(hat::lr_at(250000, cfg) == 1e-4);
  CHECK(hat::lr_at(260000, cfg) == 1e-4);
  CHECK(hat::lr_at(480000, cfg) == 1.25e-5);

  // Non-increasing with exactly one drop per milestone.
  cfg.total_iters = 12;
  cfg.milestones = {3, 7};
  cfg.base_lr = 1.0;
  double prev = cfg.base_lr;
  int drops = 0;
  for (std::int64_t i = 0; i < cfg.total_iters; ++i) {
    const double lr = hat::lr_at(i, cfg);
    CHECK(lr <= prev);
    if (lr < prev) ++drops;
    prev = lr;
  }
  CHECK(drops == 2);
  CHECK(hat::lr_at(11, cfg) == 0.25);
}

TEST_CASE("train: per-phase schedule presets") {
  hat::TrainConfig s = hat::TrainConfig::defaults_for(hat::Phase::scratch);
  CHECK(s.total_iters == 500000);
  CHECK(s.base_lr == 2e-4);
  CHECK(s.milestones ==
        std::vector<std::int64_t>{250000, 400000, 450000, 475000});
  CHECK_NOTHROW(s.validate());

  hat::TrainConfig p = hat::TrainConfig::defaults_for(hat::Phase::pretrain);
  CHECK(p.total_iters == 800000);
  CHECK(p.milestones ==
        std::vector<std::int64_t>{300000, 500000, 650000, 700000, 750000});

  hat::TrainConfig f = hat::TrainConfig::defaults_for(hat::Phase::finetune);
  CHECK(f.total_iters == 250000);
  CHECK(f.base_lr == 1e-5);
  CHECK(f.milestones ==
        std::vector<std::int64_t>{125000, 200000, 230000, 240000});
  CHECK_THROWS_AS(f.validate(), hat::ConfigError);  // no init checkpoint yet
  f.init_checkpoint = "pretrained.ckpt";
  CHECK_NOTHROW(f.validate());
}

TEST_CASE("train: config validation rejects bad values") {
  hat::TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), hat::ConfigError);
  cfg = hat::TrainConfig();
  cfg.milestones = {100, 100};
  cfg.total_iters = 200;
  CHECK_THROWS_AS(cfg.validate(), hat::ConfigError);
  cfg = hat::TrainConfig();
  cfg.milestones = {600000};
  CHECK_THROWS_AS(cfg.validate(), hat::ConfigError);
  cfg = hat::TrainConfig();
  cfg.adam_beta1 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), hat::ConfigError);
}

TEST_CASE("train: phase names round-trip") {
  for (hat::Phase p : {hat::Phase::scratch, hat::Phase::pretrain,
                       hat::Phase::finetune}) {
    CHECK(hat::phase_from_string(hat::phase_to_string(p)) == p);
  }
  CHECK_THROWS_AS(hat::phase_from_string("warmup"), hat::ConfigError);
}

TEST_CASE("train: first adam step moves by minus lr times the gradient sign") {
  Tensor p = Tensor::from_data({4}, {0.5, -0.25, 2.0, -1.0});
  p.set_requires_grad(true);
  const std::vector<real> grads = {0.3f, -0.7f, 0.01f, 1.5f};
  std::vector<real> before(p.data(), p.data() + 4);
  p.zero_grad();
  for (int j = 0; j < 4; ++j) p.grad_data()[j] = grads[j];
  hat::ParamTree params;
  params.add("p", p);
  hat::AdamState state = hat::AdamState::create(params);
  hat::TrainConfig cfg;
  const double lr = 0.01;
  hat::adam_step(params, state, lr, cfg);
  CHECK(state.t == 1);
  for (int j = 0; j < 4; ++j) {
    const double sign = grads[j] > 0 ? 1.0 : -1.0;
    CHECK(std::abs((before[j] - p.data()[j]) - lr * sign) < 1e-3 * lr);
  }
}

TEST_CASE("train: zero gradient and zero lr both leave parameters alone") {
  Rng rng(5);
  Tensor a = random_image({3, 2}, rng);
  a.set_requires_grad(true);
  Tensor b = random_image({4}, rng);
  b.set_requires_grad(true);
  hat::ParamTree params;
  params.add("a", a);
  params.add("b", b);
  hat::AdamState state = hat::AdamState::create(params);
  hat::TrainConfig cfg;

  Tensor a0 = a.detach_copy(), b0 = b.detach_copy();
  // No gradient buffer at all counts as gradient zero.
  for (int s = 0; s < 5; ++s) hat::adam_step(params, state, 0.1, cfg);
  CHECK(bit_equal(a, a0));
  CHECK(bit_equal(b, b0));

  // Nonzero gradient but lr = 0.
  a.zero_grad();
  for (int j = 0; j < 6; ++j) a.grad_data()[j] = static_cast<real>(j - 2);
  hat::adam_step(params, state, 0.0, cfg);
  CHECK(bit_equal(a, a0));
}

TEST_CASE("train: three adam steps on x squared match a straight-line oracle") {
  Tensor x = Tensor::from_data({1}, {1.0});
  x.set_requires_grad(true);
  hat::ParamTree params;
  params.add("x", x);
  hat::AdamState state = hat::AdamState::create(params);
  hat::TrainConfig cfg;
  const double lr = 0.1;
  for (int step = 0; step < 3; ++step) {
    x.zero_grad();
    x.grad_data()[0] = static_cast<real>(2.0 * static_cast<double>(x.data()[0]));
    hat::adam_step(params, state, lr, cfg);
  }

  // The same update rule written out longhand, in the same precision.
  real px = 1.0;
  real m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = 2.0 * static_cast<double>(px);
    const double md = 0.9 * static_cast<double>(m) + (1.0 - 0.9) * g;
    const double vd = 0.99 * static_cast<double>(v) + (1.0 - 0.99) * g * g;
    m = static_cast<real>(md);
    v = static_cast<real>(vd);
    const double mhat = md / (1.0 - std::pow(0.9, static_cast<double>(t)));
    const double vhat = vd / (1.0 - std::pow(0.99, static_cast<double>(t)));
    px = static_cast<real>(static_cast<double>(px) -
                           lr * mhat / (std::sqrt(vhat) + 1e-8));
  }
  CHECK(x.data()[0] == px);
}

TEST_CASE("train: non-finite gradient aborts naming the parameter") {
  Tensor w = Tensor::from_data({2}, {1.0, 2.0});
  w.set_requires_grad(true);
  w.zero_grad();
  w.grad_data()[1] = std::numeric_limits<real>::quiet_NaN();
  hat::ParamTree params;
  params.add("conv.weight", w);
  hat::AdamState state = hat::AdamState::create(params);
  hat::TrainConfig cfg;
  try {
    hat::adam_step(params, state, 0.1, cfg);
    FAIL("expected NumericError");
  } catch (const hat::NumericError& e) {
    CHECK(std::string(e.what()).find("conv.weight") != std::string::npos);
  }
}

TEST_CASE("train: gradient clipping caps the global norm") {
  Tensor a = Tensor::from_data({3}, {0.0, 0.0, 0.0});
  a.set_requires_grad(true);
  Tensor b = Tensor::from_data({1}, {0.0});
  b.set_requires_grad(true);
  a.zero_grad();
  b.zero_grad();
  a.grad_data()[0] = 3.0;
  a.grad_data()[1] = 4.0;
  b.grad_data()[0] = 12.0;  // joint norm = 13
  hat::ParamTree params;
  params.add("a", a);
  params.add("b", b);
  hat::clip_gradients(params, 6.5);
  CHECK(a.grad_data()[0] == 1.5);
  CHECK(a.grad_data()[1] == 2.0);
  CHECK(a.grad_data()[2] == 0.0);
  CHECK(b.grad_data()[0] == 6.0);
  // Under the cap: untouched.
  hat::clip_gradients(params, 20.0);
  CHECK(a.grad_data()[0] == 1.5);
  CHECK(b.grad_data()[0] == 6.0);
}

TEST_CASE("train: bicubic resize at scale one is the identity") {
  Rng rng(6);
  Tensor img = random_image({3, 7, 9}, rng);
  Tensor out = hat::bicubic_resize(img, 1.0);
  CHECK(out.shape() == img.shape());
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    CHECK(std::abs(static_cast<double>(out.data()[i]) -
                   static_cast<double>(img.data()[i])) < 1e-12);
  }
}

TEST_CASE("train: bicubic resize preserves constant images") {
  const double tol = hat::kReal64 ? 1e-12 : 1e-6;
  Tensor img = Tensor::full({1, 8, 8}, 0.7);
  for (double scale : {0.5, 0.25, 2.0, 1.5}) {
    Tensor out = hat::bicubic_resize(img, scale);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      CHECK(std::abs(static_cast<double>(out.data()[i]) - 0.7) < tol);
    }
  }
}

TEST_CASE("train: bicubic output sizes round up") {
  Rng rng(7);
  Tensor img = random_image({1, 5, 7}, rng);
  CHECK(hat::bicubic_resize(img, 0.5).shape() ==
        std::vector<std::int64_t>{1, 3, 4});
  CHECK(hat::bicubic_resize(img, 2.0).shape() ==
        std::vector<std::int64_t>{1, 10, 14});
  Tensor nine = random_image({1, 9, 9}, rng);
  // 9 * (1/3) must snap to 3, not ceil a representation error to 4.
  CHECK(hat::bicubic_resize(nine, 1.0 / 3.0).shape() ==
        std::vector<std::int64_t>{1, 3, 3});
  CHECK_THROWS_AS(hat::bicubic_resize(img, -1.0), hat::ConfigError);
}

TEST_CASE("train: bicubic downscale matches a direct convolution reference") {
  const std::int64_t h = 8, w = 8;
  Tensor img({1, h, w});
  std::vector<double> flat(h * w);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const double v = static_cast<double>(8 * y + x) / 64.0;
      img.data()[y * w + x] = static_cast<real>(v);
      flat[y * w + x] = static_cast<double>(img.data()[y * w + x]);
    }
  }
  for (bool antialias : {true, false}) {
    Tensor out = hat::bicubic_resize(img, 0.5, antialias);
    REQUIRE(out.shape() == std::vector<std::int64_t>{1, 4, 4});
    for (std::int64_t oy = 0; oy < 4; ++oy) {
      for (std::int64_t ox = 0; ox < 4; ++ox) {
        const double want =
            ref_resize_at(flat, h, w, 0.5, antialias, oy, ox);
        CHECK(std::abs(static_cast<double>(out.data()[oy * 4 + ox]) - want) <
              1e-6);
      }
    }
  }
  // Upscaling ignores the antialias switch.
  CHECK(bit_equal(hat::bicubic_resize(img, 2.0, true),
                  hat::bicubic_resize(img, 2.0, false)));
  Tensor up = hat::bicubic_resize(img, 2.0, true);
  for (std::int64_t oy = 0; oy < 16; oy += 5) {
    for (std::int64_t ox = 0; ox < 16; ox += 3) {
      const double want = ref_resize_at(flat, h, w, 2.0, true, oy, ox);
      CHECK(std::abs(static_cast<double>(up.data()[oy * 16 + ox]) - want) <
            1e-6);
    }
  }
}

TEST_CASE("train: rotation and flip produce the expected layouts") {
  Tensor img = Tensor::from_data({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r1 = hat::rot90(img, 1);
  CHECK(r1.shape() == std::vector<std::int64_t>{1, 3, 2});
  const std::vector<real> want_r1 = {3, 6, 2, 5, 1, 4};
  for (int i = 0; i < 6; ++i) CHECK(r1.data()[i] == want_r1[i]);

  Tensor f = hat::hflip(img);
  const std::vector<real> want_f = {3, 2, 1, 6, 5, 4};
  for (int i = 0; i < 6; ++i) CHECK(f.data()[i] == want_f[i]);

  CHECK(bit_equal(hat::rot90(img, 4), img));
  CHECK(bit_equal(hat::rot90(hat::rot90(img, 1), 3), img));
  CHECK(bit_equal(hat::hflip(hat::hflip(img)), img));
  CHECK(bit_equal(hat::rot90(img, -1), hat::rot90(img, 3)));
}

TEST_CASE("train: sampled pairs are aligned and degradation-consistent") {
  Rng rng(8);
  std::vector<Tensor> ds = {random_image({3, 40, 40}, rng)};
  Rng draw(9);
  auto [lr, hr] = hat::sample_batch(ds, 4, 4, 3, draw);
  CHECK(lr.shape() == std::vector<std::int64_t>{3, 3, 4, 4});
  CHECK(hr.shape() == std::vector<std::int64_t>{3, 3, 16, 16});
  for (std::int64_t b = 0; b < 3; ++b) {
    Tensor hr_b = copy_sample(hr, b);
    Tensor redone = hat::bicubic_resize(hr_b, 0.25, true);
    Tensor lr_b = copy_sample(lr, b);
    for (std::int64_t i = 0; i < lr_b.numel(); ++i) {
      CHECK(std::abs(static_cast<double>(redone.data()[i]) -
                     static_cast<double>(lr_b.data()[i])) <= 1e-6);
    }
  }
}

TEST_CASE("train: crop offsets stay on the scale grid") {
  // Every pixel carries its row index, so the smallest value in a crop is its
  // vertical offset no matter how the patch was rotated.
  Tensor img({1, 44, 40});
  for (std::int64_t y = 0; y < 44; ++y) {
    for (std::int64_t x = 0; x < 40; ++x) {
      img.data()[y * 40 + x] = static_cast<real>(y);
    }
  }
  std::vector<Tensor> ds = {img};
  Rng rng(10);
  auto [lr, hr] = hat::sample_batch(ds, 10, 4, 16, rng);
  (void)lr;
  for (std::int64_t b = 0; b < 16; ++b) {
    Tensor hr_b = copy_sample(hr, b);
    real lo = hr_b.data()[0];
    for (std::int64_t i = 0; i < hr_b.numel(); ++i) {
      lo = std::min(lo, hr_b.data()[i]);
    }
    CHECK((lo == 0.0 || lo == 4.0));  // offsets 1,2,3 would show through here
  }
}

TEST_CASE("train: every sample is a dihedral transform of the source patch") {
  // Image exactly one patch big, so the crop is forced and only the
  // augmentation varies.
  Tensor img({1, 12, 12});
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    img.data()[i] = static_cast<real>(i);
  }
  std::vector<Tensor> ds = {img};
  std::vector<Tensor> variants;
  for (std::int64_t k = 0; k < 4; ++k) {
    variants.push_back(hat::rot90(img, k));
    variants.push_back(hat::rot90(hat::hflip(img), k));
  }
  Rng rng(11);
  auto [lr, hr] = hat::sample_batch(ds, 6, 2, 12, rng);
  (void)lr;
  std::set<std::size_t> seen;
  for (std::int64_t b = 0; b < 12; ++b) {
    Tensor hr_b = copy_sample(hr, b);
    bool matched = false;
    for (std::size_t v = 0; v < variants.size(); ++v) {
      if (bit_equal(hr_b, variants[v])) {
        matched = true;
        seen.insert(v);
        break;
      }
    }
    CHECK(matched);
  }
  CHECK(seen.size() >= 2);  // the augmentation actually varies
}

TEST_CASE("train: undersized and unusable datasets") {
  Rng rng(12);
  std::vector<Tensor> mixed = {random_image({3, 8, 8}, rng),
                               random_image({3, 40, 40}, rng)};
  Rng draw(13);
  // The small image is skipped (with a warning), the big one still serves.
  auto [lr, hr] = hat::sample_batch(mixed, 10, 4, 2, draw);
  CHECK(hr.shape() == std::vector<std::int64_t>{2, 3, 40, 40});

  std::vector<Tensor> tiny = {random_image({3, 8, 8}, rng)};
  CHECK_THROWS_AS(hat::sample_batch(tiny, 10, 4, 1, draw), hat::UsageError);
  std::vector<Tensor> none;
  CHECK_THROWS_AS(hat::sample_batch(none, 10, 4, 1, draw), hat::UsageError);
}

TEST_CASE("train: sampling is reproducible for a fixed seed") {
  Rng rng(14);
  std::vector<Tensor> ds = {random_image({3, 32, 32}, rng),
                            random_image({3, 48, 40}, rng)};
  Rng a(15), b(15);
  auto [lr1, hr1] = hat::sample_batch(ds, 8, 2, 4, a);
  auto [lr2, hr2] = hat::sample_batch(ds, 8, 2, 4, b);
  CHECK(bit_equal(lr1, lr2));
  CHECK(bit_equal(hr1, hr2));
}

TEST_CASE("train: loop bookkeeping (losses, logs, checkpoints)") {
  Rng rng(16);
  hat::HatModel model = hat::HatModel::create(tiny_model_config(), rng);
  std::vector<Tensor> ds = {random_image({3, 24, 24}, rng),
                            random_image({3, 24, 24}, rng)};
  hat::TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.patch_size = 8;
  cfg.total_iters = 6;
  cfg.milestones = {2, 4};
  cfg.base_lr = 1e-3;
  cfg.log_every = 2;
  cfg.seed = 9;

  std::vector<std::pair<std::int64_t, std::string>> saves;
  std::ostringstream log;
  hat::TrainHooks hooks;
  hooks.save = [&](std::int64_t done, const std::string& tag) {
    saves.emplace_back(done, tag);
  };
  hooks.log = &log;

  hat::TrainResult result = hat::train_loop(model, ds, cfg, hooks);
  CHECK(result.iters_run == 6);
  REQUIRE(result.losses.size() == 6);
  for (double l : result.losses) CHECK(std::isfinite(l));

  REQUIRE(saves.size() == 3);
  CHECK(saves[0] == std::pair<std::int64_t, std::string>{2, "milestone"});
  CHECK(saves[1] == std::pair<std::int64_t, std::string>{4, "milestone"});
  CHECK(saves[2] == std::pair<std::int64_t, std::string>{6, "final"});

  // Logged at iters 0, 2, 4 (interval) and 5 (last); two tabs per line.
  std::istringstream lines(log.str());
  std::string line;
  std::vector<std::string> first_fields;
  while (std::getline(lines, line)) {
    CHECK(std::count(line.begin(), line.end(), '\t') == 2);
    first_fields.push_back(line.substr(0, line.find('\t')));
  }
  CHECK(first_fields == std::vector<std::string>{"0", "2", "4", "5"});
}

TEST_CASE("train: same seed gives the same loss curve") {
  std::vector<Tensor> ds;
  {
    Rng rng(17);
    ds.push_back(random_image({3, 20, 20}, rng));
  }
  hat::TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.patch_size = 8;
  cfg.total_iters = 4;
  cfg.milestones = {};
  cfg.base_lr = 1e-3;
  cfg.seed = 21;

  Rng m1(18);
  hat::HatModel model1 = hat::HatModel::create(tiny_model_config(), m1);
  hat::TrainResult r1 = hat::train_loop(model1, ds, cfg);
  Rng m2(18);
  hat::HatModel model2 = hat::HatModel::create(tiny_model_config(), m2);
  hat::TrainResult r2 = hat::train_loop(model2, ds, cfg);
  REQUIRE(r1.losses.size() == r2.losses.size());
  for (std::size_t i = 0; i < r1.losses.size(); ++i) {
    CHECK(r1.losses[i] == r2.losses[i]);
  }
}

TEST_CASE("train: loss falls when fitting a constant image") {
  Rng rng(19);
  hat::HatModel model = hat::HatModel::create(tiny_model_config(), rng);
  std::vector<Tensor> ds = {Tensor::full({3, 16, 16}, 0.5)};
  hat::TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.patch_size = 8;
  cfg.total_iters = 30;
  cfg.milestones = {};
  cfg.base_lr = 5e-3;
  cfg.seed = 4;
  hat::TrainResult result = hat::train_loop(model, ds, cfg);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 5; ++i) {
    head += result.losses[i];
    tail += result.losses[result.losses.size() - 1 - i];
  }
  CHECK(tail < head);
}

TEST_CASE("train: a blow-up aborts without another checkpoint") {
  Rng rng(20);
  hat::HatModel model = hat::HatModel::create(tiny_model_config(), rng);
  std::vector<Tensor> ds = {random_image({3, 16, 16}, rng)};
  hat::TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.patch_size = 8;
  cfg.total_iters = 10;
  cfg.milestones = {2};
  cfg.base_lr = 1e-3;
  cfg.seed = 2;

  std::vector<std::string> tags;
  hat::TrainHooks hooks;
  hooks.save = [&](std::int64_t done, const std::string& tag) {
    (void)done;
    tags.push_back(tag);
    // Corrupt a parameter right after the save, as a stand-in for the model
    // diverging: the next forward must abort instead of saving again.
    model.recon_last.bias.data()[0] = std::numeric_limits<real>::quiet_NaN();
  };
  CHECK_THROWS_AS(hat::train_loop(model, ds, cfg, hooks), hat::NumericError);
  CHECK(tags == std::vector<std::string>{"milestone"});
}

TEST_CASE("train: finetune without an init checkpoint is rejected") {
  Rng rng(22);
  hat::HatModel model = hat::HatModel::create(tiny_model_config(), rng);
  std::vector<Tensor> ds = {random_image({3, 16, 16}, rng)};
  hat::TrainConfig cfg;
  cfg.phase = hat::Phase::finetune;
  cfg.total_iters = 2;
  cfg.milestones = {};
  cfg.patch_size = 8;
  cfg.batch_size = 1;
  CHECK_THROWS_AS(hat::train_loop(model, ds, cfg), hat::ConfigError);
}
