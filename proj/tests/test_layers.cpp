#include "hat/layers.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"

using hat::Rng;
using hat::Tape;
using hat::Tensor;

namespace {

constexpr double kEps = hat::kReal64 ? 1e-5 : 1e-2;
constexpr double kGradTol = hat::kReal64 ? 1e-4 : 3e-2;
constexpr double kStatTol = hat::kReal64 ? 1e-9 : 1e-4;

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng,
                     bool requires_grad = false) {
  Tensor t(std::move(shape), requires_grad);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t.data()[i] = static_cast<hat::real>(rng.uniform(-1.0, 1.0));
  }
  return t;
}

// Direct convolution reference: plain quadruple loop, no im2col.
Tensor conv_reference(const Tensor& x, const Tensor& w, const Tensor& b,
                      std::int64_t stride, std::int64_t pad) {
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const std::int64_t cout = w.dim(0), k = w.dim(2);
  const std::int64_t ho = (h + 2 * pad - k) / stride + 1;
  const std::int64_t wo = (ww + 2 * pad - k) / stride + 1;
  Tensor y({n, cout, ho, wo});
  for (std::int64_t img = 0; img < n; ++img)
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double s = b.data()[co];
          for (std::int64_t ci = 0; ci < cin; ++ci)
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const std::int64_t iy = oy * stride - pad + ky;
                const std::int64_t ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= ww) continue;
                s += static_cast<double>(
                         x.data()[((img * cin + ci) * h + iy) * ww + ix]) *
                     w.data()[((co * cin + ci) * k + ky) * k + kx];
              }
          y.data()[((img * cout + co) * ho + oy) * wo + ox] =
              static_cast<hat::real>(s);
        }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  }
  return m;
}

}  // namespace

TEST_CASE("layers: 1x1 conv with unit weight copies the input") {
  Rng rng(1);
  Tensor x = random_tensor({1, 1, 3, 3}, rng);
  hat::Conv2dParams p = hat::Conv2dParams::create(1, 1, 1, 1, 0,
                                                  hat::Init::kTruncNormal, rng);
  p.weight.data()[0] = 1;
  CHECK(max_abs_diff(hat::conv2d(x, p), x) == 0.0);
}

TEST_CASE("layers: conv2d matches the direct-loop reference") {
  Rng rng(2);
  struct Case {
    std::vector<std::int64_t> shape;
    std::int64_t cout, k, stride, pad;
  };
  const Case cases[] = {
      {{2, 3, 5, 6}, 4, 3, 1, 1},
      {{1, 2, 7, 5}, 3, 3, 2, 0},
      {{1, 4, 4, 4}, 2, 1, 1, 0},
      {{2, 1, 6, 6}, 1, 5, 1, 2},
  };
  for (const Case& tc : cases) {
    Tensor x = random_tensor(tc.shape, rng);
    hat::Conv2dParams p = hat::Conv2dParams::create(
        tc.shape[1], tc.cout, tc.k, tc.stride, tc.pad, hat::Init::kKaimingUniform,
        rng);
    for (std::int64_t i = 0; i < p.bias.numel(); ++i) {
      p.bias.data()[i] = static_cast<hat::real>(rng.uniform(-0.5, 0.5));
    }
    Tensor ref = conv_reference(x, p.weight, p.bias, tc.stride, tc.pad);
    CHECK(max_abs_diff(hat::conv2d(x, p), ref) < (hat::kReal64 ? 1e-12 : 1e-5));
  }
  Tensor bad = random_tensor({1, 2, 4, 4}, rng);
  hat::Conv2dParams p3 =
      hat::Conv2dParams::create(3, 2, 3, 1, 1, hat::Init::kTruncNormal, rng);
  CHECK_THROWS_AS(hat::conv2d(bad, p3), hat::ShapeError);
}

TEST_CASE("layers: conv2d gradients") {
  Rng rng(3);
  Tensor x = random_tensor({1, 2, 4, 5}, rng, true);
  hat::Conv2dParams p =
      hat::Conv2dParams::create(2, 3, 3, 1, 1, hat::Init::kTruncNormal, rng);
  Tensor w = random_tensor({1, 3, 4, 5}, rng);
  auto f = [&]() { return hat::sum_all(hat::mul(hat::conv2d(x, p), w)); };
  CHECK(hat::grad_check(f, x, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.weight, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.bias, kEps).max_rel_err < kGradTol);
}

TEST_CASE("layers: depthwise conv filters each channel independently") {
  Rng rng(31);
  const std::int64_t n = 2, c = 3, h = 5, w = 4, k = 3;
  Tensor x = random_tensor({n, c, h, w}, rng, true);
  hat::Conv2dParams p = hat::Conv2dParams::create_depthwise(c, k, 1, 1, rng);
  for (std::int64_t i = 0; i < c; ++i) {
    p.bias.data()[i] = static_cast<hat::real>(rng.uniform(-0.5, 0.5));
  }
  Tensor y = hat::conv2d(x, p);
  CHECK(y.shape() == x.shape());
  for (std::int64_t img = 0; img < n; ++img)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t oy = 0; oy < h; ++oy)
        for (std::int64_t ox = 0; ox < w; ++ox) {
          double s = p.bias.data()[ch];
          for (std::int64_t ky = 0; ky < k; ++ky)
            for (std::int64_t kx = 0; kx < k; ++kx) {
              const std::int64_t iy = oy - 1 + ky, ix = ox - 1 + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              s += static_cast<double>(
                       x.data()[((img * c + ch) * h + iy) * w + ix]) *
                   p.weight.data()[(ch * k + ky) * k + kx];
            }
          CHECK(static_cast<double>(
                    y.data()[((img * c + ch) * h + oy) * w + ox]) ==
                doctest::Approx(s).epsilon(1e-5));
        }
  Tensor wv = random_tensor({n, c, h, w}, rng);
  auto f = [&]() { return hat::sum_all(hat::mul(hat::conv2d(x, p), wv)); };
  CHECK(hat::grad_check(f, x, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.weight, kEps).max_rel_err < kGradTol);

  // The depthwise CAB keeps the channel count end to end.
  hat::CabParams cab = hat::CabParams::create(6, 3, 2, rng, true);
  CHECK(cab.conv1.weight.shape() == std::vector<std::int64_t>{6, 1, 3, 3});
  Tensor z = random_tensor({1, 6, 4, 4}, rng);
  CHECK(hat::cab_forward(z, cab).shape() == z.shape());
}

TEST_CASE("layers: linear matches manual product and its gradients") {
  Rng rng(4);
  Tensor x = random_tensor({3, 4}, rng, true);
  hat::LinearParams p = hat::LinearParams::create(4, 5, rng);
  p.bias.data()[2] = 1;
  Tensor y = hat::linear(x, p);
  for (int i = 0; i < 3; ++i)
    for (int o = 0; o < 5; ++o) {
      double s = p.bias.data()[o];
      for (int k = 0; k < 4; ++k) {
        s += static_cast<double>(x.data()[i * 4 + k]) * p.weight.data()[o * 4 + k];
      }
      CHECK(static_cast<double>(y.data()[i * 5 + o]) ==
            doctest::Approx(s).epsilon(1e-5));
    }
  Tensor w = random_tensor({3, 5}, rng);
  auto f = [&]() { return hat::sum_all(hat::mul(hat::linear(x, p), w)); };
  CHECK(hat::grad_check(f, x, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.weight, kEps).max_rel_err < kGradTol);
}

TEST_CASE("layers: layer_norm of a constant row returns beta") {
  hat::LayerNormParams p = hat::LayerNormParams::create(6);
  for (int i = 0; i < 6; ++i) p.beta.data()[i] = static_cast<hat::real>(i);
  Tensor x = Tensor::full({2, 6}, 3.25);
  Tensor y = hat::layer_norm(x, p);
  for (int r = 0; r < 2; ++r)
    for (int i = 0; i < 6; ++i) {
      CHECK(static_cast<double>(y.data()[r * 6 + i]) ==
            doctest::Approx(i).epsilon(1e-3));
    }
}

TEST_CASE("layers: layer_norm normalizes each token before the affine") {
  Rng rng(5);
  Tensor x = random_tensor({4, 7, 16}, rng);
  hat::LayerNormParams p = hat::LayerNormParams::create(16);
  Tensor y = hat::layer_norm(x, p);
  for (int r = 0; r < 4 * 7; ++r) {
    double mean = 0, var = 0;
    for (int j = 0; j < 16; ++j) mean += y.data()[r * 16 + j];
    mean /= 16;
    for (int j = 0; j < 16; ++j) {
      const double d = y.data()[r * 16 + j] - mean;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(mean) < kStatTol);
    CHECK(std::abs(var - 1.0) < 1e-4);  // eps inside the sqrt shifts var a hair
  }
}

TEST_CASE("layers: layer_norm gradients") {
  Rng rng(6);
  Tensor x = random_tensor({3, 10}, rng, true);
  hat::LayerNormParams p = hat::LayerNormParams::create(10);
  for (int i = 0; i < 10; ++i) {
    p.gamma.data()[i] = static_cast<hat::real>(rng.uniform(0.5, 1.5));
    p.beta.data()[i] = static_cast<hat::real>(rng.uniform(-0.5, 0.5));
  }
  Tensor w = random_tensor({3, 10}, rng);
  auto f = [&]() { return hat::sum_all(hat::mul(hat::layer_norm(x, p), w)); };
  CHECK(hat::grad_check(f, x, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.gamma, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.beta, kEps).max_rel_err < kGradTol);
}

TEST_CASE("layers: channel attention with zero weights halves the input") {
  Rng rng(7);
  Tensor x = random_tensor({2, 4, 3, 3}, rng);
  hat::ChannelAttentionParams p = hat::ChannelAttentionParams::create(4, 2, rng);
  for (auto* t : {&p.down_w, &p.up_w}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) t->data()[i] = 0;
  }
  // sigmoid(0) = 0.5 exactly, so the gate halves every channel.
  Tensor y = hat::channel_attention(x, p);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    CHECK(y.data()[i] == static_cast<hat::real>(0.5) * x.data()[i]);
  }
}

TEST_CASE("layers: channel attention matches a scalar reference") {
  Rng rng(8);
  const std::int64_t n = 2, c = 6, h = 4, w = 5;
  Tensor x = random_tensor({n, c, h, w}, rng);
  hat::ChannelAttentionParams p = hat::ChannelAttentionParams::create(c, 3, rng);
  for (auto* t : {&p.down_b, &p.up_b}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) {
      t->data()[i] = static_cast<hat::real>(rng.uniform(-0.2, 0.2));
    }
  }
  const std::int64_t hidden = p.down_w.dim(0);
  Tensor y = hat::channel_attention(x, p);
  for (std::int64_t img = 0; img < n; ++img) {
    std::vector<double> pooled(c, 0.0);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t i = 0; i < h * w; ++i) {
        pooled[ch] += x.data()[(img * c + ch) * h * w + i];
      }
      pooled[ch] /= static_cast<double>(h * w);
    }
    std::vector<double> hid(hidden);
    for (std::int64_t o = 0; o < hidden; ++o) {
      double s = p.down_b.data()[o];
      for (std::int64_t ch = 0; ch < c; ++ch) {
        s += p.down_w.data()[o * c + ch] * pooled[ch];
      }
      hid[o] = s > 0 ? s : 0;
    }
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = p.up_b.data()[ch];
      for (std::int64_t o = 0; o < hidden; ++o) {
        s += p.up_w.data()[ch * hidden + o] * hid[o];
      }
      const double gate = 1.0 / (1.0 + std::exp(-s));
      for (std::int64_t i = 0; i < h * w; ++i) {
        const double expect = gate * x.data()[(img * c + ch) * h * w + i];
        CHECK(static_cast<double>(y.data()[(img * c + ch) * h * w + i]) ==
              doctest::Approx(expect).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("layers: channel attention squeeze width floors at one") {
  Rng rng(9);
  hat::ChannelAttentionParams p = hat::ChannelAttentionParams::create(6, 16, rng);
  CHECK(p.down_w.dim(0) == 1);
  hat::ChannelAttentionParams q = hat::ChannelAttentionParams::create(180, 16, rng);
  CHECK(q.down_w.dim(0) == 11);
}

TEST_CASE("layers: channel attention gradients") {
  Rng rng(10);
  Tensor x = random_tensor({1, 4, 3, 3}, rng, true);
  hat::ChannelAttentionParams p = hat::ChannelAttentionParams::create(4, 2, rng);
  Tensor w = random_tensor({1, 4, 3, 3}, rng);
  auto f = [&]() {
    return hat::sum_all(hat::mul(hat::channel_attention(x, p), w));
  };
  CHECK(hat::grad_check(f, x, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.down_w, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.up_w, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.up_b, kEps).max_rel_err < kGradTol);
}

TEST_CASE("layers: cab keeps shape and differentiates") {
  Rng rng(11);
  Tensor x = random_tensor({1, 6, 4, 4}, rng, true);
  hat::CabParams p = hat::CabParams::create(6, 3, 3, rng);
  Tensor y = hat::cab_forward(x, p);
  CHECK(y.shape() == x.shape());
  Tensor w = random_tensor({1, 6, 4, 4}, rng);
  auto f = [&]() { return hat::sum_all(hat::mul(hat::cab_forward(x, p), w)); };
  CHECK(hat::grad_check(f, x, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.conv1.weight, kEps).max_rel_err < kGradTol);
  CHECK_THROWS_AS(hat::CabParams::create(8, 3, 2, rng), hat::ConfigError);
}

TEST_CASE("layers: mlp with zero weights emits the output bias") {
  Rng rng(12);
  hat::MlpParams p = hat::MlpParams::create(4, 2.0, rng);
  for (auto* t : {&p.fc1.weight, &p.fc2.weight}) {
    for (std::int64_t i = 0; i < t->numel(); ++i) t->data()[i] = 0;
  }
  p.fc2.bias.data()[1] = 7;
  Tensor y = hat::mlp(Tensor::full({2, 3, 4}, 5.0), p);
  for (int t = 0; t < 6; ++t) {
    CHECK(y.data()[t * 4 + 0] == 0.0);
    CHECK(y.data()[t * 4 + 1] == 7.0);
  }
  CHECK(p.fc1.weight.dim(0) == 8);  // hidden ratio 2
  CHECK_THROWS_AS(hat::MlpParams::create(5, 1.5, rng), hat::ConfigError);
}

TEST_CASE("layers: mlp gradients") {
  Rng rng(13);
  Tensor x = random_tensor({2, 5, 6}, rng, true);
  hat::MlpParams p = hat::MlpParams::create(6, 2.0, rng);
  Tensor w = random_tensor({2, 5, 6}, rng);
  auto f = [&]() { return hat::sum_all(hat::mul(hat::mlp(x, p), w)); };
  CHECK(hat::grad_check(f, x, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.fc1.weight, kEps).max_rel_err < kGradTol);
  CHECK(hat::grad_check(f, p.fc2.bias, kEps).max_rel_err < kGradTol);
}

TEST_CASE("layers: pixel shuffle lays out channel blocks row major") {
  Tensor x = Tensor::from_data({1, 4, 1, 1}, {1, 2, 3, 4});
  Tensor y = hat::pixel_shuffle(x, 2);
  CHECK(y.shape() == std::vector<std::int64_t>{1, 1, 2, 2});
  CHECK(y.data()[0] == 1);
  CHECK(y.data()[1] == 2);
  CHECK(y.data()[2] == 3);
  CHECK(y.data()[3] == 4);
  CHECK_THROWS_AS(hat::pixel_shuffle(Tensor::zeros({1, 3, 2, 2}), 2),
                  hat::ShapeError);
}

TEST_CASE("layers: pixel shuffle and unshuffle invert each other") {
  Rng rng(14);
  Tensor x = random_tensor({2, 12, 3, 5}, rng);
  Tensor y = hat::pixel_unshuffle(hat::pixel_shuffle(x, 2), 2);
  CHECK(max_abs_diff(x, y) == 0.0);
  Tensor z = random_tensor({1, 2, 6, 9}, rng);
  CHECK(max_abs_diff(hat::pixel_shuffle(hat::pixel_unshuffle(z, 3), 3), z) == 0.0);
}

TEST_CASE("layers: pixel shuffle gradient is a permutation") {
  Rng rng(15);
  Tensor x = random_tensor({1, 8, 2, 3}, rng, true);
  Tensor w = random_tensor({1, 2, 4, 6}, rng);
  auto f = [&]() { return hat::sum_all(hat::mul(hat::pixel_shuffle(x, 2), w)); };
  CHECK(hat::grad_check(f, x, kEps).max_rel_err < kGradTol);
}

TEST_CASE("layers: reflect padding mirrors without repeating the edge") {
  Tensor x = Tensor::from_data({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor y = hat::reflect_pad_br(x, 1, 2);
  CHECK(y.shape() == std::vector<std::int64_t>{1, 1, 3, 6});
  // Row 0: 1 2 3 4 | 3 2
  CHECK(y.data()[4] == 3);
  CHECK(y.data()[5] == 2);
  // Padded row mirrors row 0.
  CHECK(y.data()[2 * 6 + 0] == 1);
  CHECK(y.data()[2 * 6 + 3] == 4);
  CHECK_THROWS_AS(hat::reflect_pad_br(x, 2, 0), hat::ShapeError);
}
