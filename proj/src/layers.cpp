#include "hat/layers.hpp"

#include <cmath>
#include <string>

namespace hat {

namespace {

using std::int64_t;

void check_nchw(const Tensor& x, const char* op) {
  if (!x.defined() || x.ndim() != 4) {
    throw ShapeError(std::string(op) + ": expected NCHW input, got " +
                     (x.defined() ? shape_str(x.shape()) : "undefined"));
  }
}

// Unfolds conv patches: [N, C, H, W] -> [N, Ho*Wo, C*k*k].  Out-of-image taps
// read zero; zero padding is folded into the index map.
Tensor im2col(const Tensor& x, int64_t k, int64_t stride, int64_t pad,
              int64_t ho, int64_t wo) {
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t ck = c * k * k;
  const int64_t l = ho * wo;
  return map_index(x, {n, l, ck}, "im2col",
                   [=](int64_t o) -> int64_t {
                     const int64_t ckk = o % ck;
                     const int64_t rest = o / ck;
                     const int64_t pos = rest % l;
                     const int64_t img = rest / l;
                     const int64_t kx = ckk % k;
                     const int64_t ky = (ckk / k) % k;
                     const int64_t ch = ckk / (k * k);
                     const int64_t oy = pos / wo, ox = pos % wo;
                     const int64_t iy = oy * stride - pad + ky;
                     const int64_t ix = ox * stride - pad + kx;
                     if (iy < 0 || iy >= h || ix < 0 || ix >= w) return -1;
                     return ((img * c + ch) * h + iy) * w + ix;
                   });
}

}  // namespace

// ====== init ======

void init_trunc_normal(Tensor& t, Rng& rng, double stddev) {
  real* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) {
    p[i] = static_cast<real>(rng.trunc_normal(stddev));
  }
}

void init_kaiming_uniform(Tensor& t, Rng& rng, int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  real* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) {
    p[i] = static_cast<real>(rng.uniform(-bound, bound));
  }
}

// ====== linear ======

LinearParams LinearParams::create(int64_t in, int64_t out, Rng& rng) {
  if (in < 1 || out < 1) throw ConfigError("linear: dims must be positive");
  LinearParams p;
  p.weight = Tensor({out, in}, true);
  p.bias = Tensor({out}, true);
  init_trunc_normal(p.weight, rng);
  return p;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  if (!x.defined() || x.ndim() < 2) {
    throw ShapeError("linear: input rank must be >= 2");
  }
  const int64_t in = p.weight.dim(1);
  if (x.dim(-1) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) +
                     " does not match weight " + shape_str(p.weight.shape()));
  }
  Tensor y = matmul(x, transpose_last2(p.weight));
  return add(y, p.bias);
}

// ====== conv2d ======

Conv2dParams Conv2dParams::create(int64_t in, int64_t out, int64_t k,
                                  int64_t stride, int64_t pad, Init init,
                                  Rng& rng) {
  if (in < 1 || out < 1 || k < 1 || stride < 1 || pad < 0) {
    throw ConfigError("conv2d: invalid dims");
  }
  Conv2dParams p;
  p.weight = Tensor({out, in, k, k}, true);
  p.bias = Tensor({out}, true);
  p.stride = stride;
  p.pad = pad;
  if (init == Init::kTruncNormal) {
    init_trunc_normal(p.weight, rng);
  } else {
    init_kaiming_uniform(p.weight, rng, in * k * k);
  }
  return p;
}

Conv2dParams Conv2dParams::create_depthwise(int64_t c, int64_t k,
                                            int64_t stride, int64_t pad,
                                            Rng& rng) {
  if (c < 1 || k < 1 || stride < 1 || pad < 0) {
    throw ConfigError("conv2d: invalid dims");
  }
  Conv2dParams p;
  p.weight = Tensor({c, 1, k, k}, true);
  p.bias = Tensor({c}, true);
  p.stride = stride;
  p.pad = pad;
  p.groups = c;
  init_trunc_normal(p.weight, rng);
  return p;
}

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  check_nchw(x, "conv2d");
  const int64_t cout = p.weight.dim(0), cin = p.weight.dim(1), k = p.weight.dim(2);
  const bool depthwise = p.groups != 1;
  if (depthwise && (p.groups != cout || cin != 1)) {
    throw ConfigError("conv2d: only dense or depth-wise groupings supported");
  }
  if (x.dim(1) != (depthwise ? cout : cin)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) +
                     " does not match weight " + shape_str(p.weight.shape()));
  }
  const int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int64_t ho = (h + 2 * p.pad - k) / p.stride + 1;
  const int64_t wo = (w + 2 * p.pad - k) / p.stride + 1;
  if (h + 2 * p.pad < k || w + 2 * p.pad < k) {
    throw ShapeError("conv2d: kernel larger than padded input " +
                     shape_str(x.shape()));
  }
  const int64_t l = ho * wo;
  Tensor cols = im2col(x, k, p.stride, p.pad, ho, wo);  // [N, L, C*k*k]
  if (depthwise) {
    // Per-channel filtering: regroup taps channel-major and contract each
    // channel's k*k column against its own filter.
    Tensor t = permute(reshape(cols, {n, l, cout, k * k}), {0, 2, 1, 3});
    Tensor y = matmul(t, reshape(p.weight, {cout, k * k, 1}));  // [N,C,L,1]
    y = add(reshape(y, {n, cout, l}), reshape(p.bias, {cout, 1}));
    return reshape(y, {n, cout, ho, wo});
  }
  Tensor wf = reshape(p.weight, {cout, cin * k * k});
  Tensor y = matmul(cols, transpose_last2(wf));  // [N, L, Cout]
  y = add(y, p.bias);
  y = permute(y, {0, 2, 1});                     // [N, Cout, L]
  return reshape(y, {n, cout, ho, wo});
}

// ====== layer norm ======

LayerNormParams LayerNormParams::create(int64_t c) {
  if (c < 1) throw ConfigError("layer_norm: channel count must be positive");
  LayerNormParams p;
  p.gamma = Tensor({c}, true);
  p.beta = Tensor({c}, true);
  for (int64_t i = 0; i < c; ++i) p.gamma.data()[i] = 1;
  return p;
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  if (!x.defined() || x.ndim() < 2) {
    throw ShapeError("layer_norm: input rank must be >= 2");
  }
  const int64_t c = p.gamma.dim(0);
  if (x.dim(-1) != c) {
    throw ShapeError("layer_norm: last dim of " + shape_str(x.shape()) +
                     " != " + std::to_string(c));
  }
  const int64_t rows = x.numel() / c;
  Tensor out(x.shape());
  const real* xd = x.data();
  const real* g = p.gamma.data();
  const real* b = p.beta.data();
  real* y = out.data();
  const double eps = p.eps;
  for (int64_t r = 0; r < rows; ++r) {
    const real* xr = xd + r * c;
    real* yr = y + r * c;
    double mean = 0;
    for (int64_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<double>(c);
    double var = 0;
    for (int64_t j = 0; j < c; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < c; ++j) {
      const double xn = (xr[j] - mean) * inv_std;
      yr[j] = static_cast<real>(xn * g[j] + b[j]);
    }
  }
  ensure_finite(out, "layer_norm");
  if (detail::wants_grad({&x, &p.gamma, &p.beta})) {
    out.set_requires_grad(true);
    auto ix = x.impl(), ig = p.gamma.impl(), ib = p.beta.impl(), io = out.impl();
    const bool gx = x.requires_grad();
    const bool gg = p.gamma.requires_grad();
    const bool gb = p.beta.requires_grad();
    Tape::active()->record(io, [ix, ig, ib, io, rows, c, eps, gx, gg, gb]() {
      if (io->grad.empty()) return;
      const real* xd = ix->data.data();
      const real* g = ig->data.data();
      const real* dy = io->grad.data();
      real* dx = gx ? detail::ensure_grad(ix).data() : nullptr;
      real* dg = gg ? detail::ensure_grad(ig).data() : nullptr;
      real* db = gb ? detail::ensure_grad(ib).data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const real* xr = xd + r * c;
        const real* dr = dy + r * c;
        double mean = 0;
        for (int64_t j = 0; j < c; ++j) mean += xr[j];
        mean /= static_cast<double>(c);
        double var = 0;
        for (int64_t j = 0; j < c; ++j) {
          const double d = xr[j] - mean;
          var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat)
        //                                     - xhat * mean(dxhat * xhat))
        double m1 = 0, m2 = 0;
        for (int64_t j = 0; j < c; ++j) {
          const double xn = (xr[j] - mean) * inv_std;
          const double dh = static_cast<double>(dr[j]) * g[j];
          m1 += dh;
          m2 += dh * xn;
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        for (int64_t j = 0; j < c; ++j) {
          const double xn = (xr[j] - mean) * inv_std;
          if (dx) {
            const double dh = static_cast<double>(dr[j]) * g[j];
            dx[r * c + j] += static_cast<real>(inv_std * (dh - m1 - xn * m2));
          }
          if (dg) dg[j] += static_cast<real>(static_cast<double>(dr[j]) * xn);
          if (db) db[j] += dr[j];
        }
      }
    });
  }
  return out;
}

// ====== channel attention ======

ChannelAttentionParams ChannelAttentionParams::create(int64_t c,
                                                      int64_t reduction,
                                                      Rng& rng) {
  if (c < 1 || reduction < 1) throw ConfigError("channel_attention: bad dims");
  // Floored squeeze width; C need not divide evenly.
  const int64_t hidden = std::max<int64_t>(1, c / reduction);
  ChannelAttentionParams p;
  p.down_w = Tensor({hidden, c}, true);
  p.down_b = Tensor({hidden}, true);
  p.up_w = Tensor({c, hidden}, true);
  p.up_b = Tensor({c}, true);
  init_trunc_normal(p.down_w, rng);
  init_trunc_normal(p.up_w, rng);
  return p;
}

Tensor channel_attention(const Tensor& x, const ChannelAttentionParams& p) {
  check_nchw(x, "channel_attention");
  const int64_t n = x.dim(0), c = x.dim(1);
  if (c != p.down_w.dim(1)) {
    throw ShapeError("channel_attention: input " + shape_str(x.shape()) +
                     " does not match weights for C=" +
                     std::to_string(p.down_w.dim(1)));
  }
  Tensor pooled = reshape(mean_over(x, {2, 3}, true), {n, c});
  Tensor h = relu(add(matmul(pooled, transpose_last2(p.down_w)), p.down_b));
  Tensor s = sigmoid(add(matmul(h, transpose_last2(p.up_w)), p.up_b));
  return mul(x, reshape(s, {n, c, 1, 1}));
}

// ====== channel attention block ======

CabParams CabParams::create(int64_t c, int64_t beta, int64_t reduction,
                            Rng& rng, bool depthwise) {
  if (beta < 1 || c % beta != 0) {
    throw ConfigError("cab: channel squeeze " + std::to_string(beta) +
                      " must divide C=" + std::to_string(c));
  }
  CabParams p;
  if (depthwise) {
    p.conv1 = Conv2dParams::create_depthwise(c, 3, 1, 1, rng);
    p.conv2 = Conv2dParams::create_depthwise(c, 3, 1, 1, rng);
  } else {
    p.conv1 = Conv2dParams::create(c, c / beta, 3, 1, 1, Init::kTruncNormal, rng);
    p.conv2 = Conv2dParams::create(c / beta, c, 3, 1, 1, Init::kTruncNormal, rng);
  }
  p.ca = ChannelAttentionParams::create(c, reduction, rng);
  return p;
}

Tensor cab_forward(const Tensor& x, const CabParams& p) {
  Tensor h = conv2d(x, p.conv1);
  h = gelu(h);
  h = conv2d(h, p.conv2);
  return channel_attention(h, p.ca);
}

// ====== token MLP ======

MlpParams MlpParams::create(int64_t c, double ratio, Rng& rng) {
  const double hidden_f = static_cast<double>(c) * ratio;
  const int64_t hidden = static_cast<int64_t>(hidden_f);
  if (hidden < 1 || static_cast<double>(hidden) != hidden_f) {
    throw ConfigError("mlp: C * ratio must be a positive integer, got " +
                      std::to_string(hidden_f));
  }
  MlpParams p;
  p.fc1 = LinearParams::create(c, hidden, rng);
  p.fc2 = LinearParams::create(hidden, c, rng);
  return p;
}

Tensor mlp(const Tensor& x, const MlpParams& p) {
  return linear(gelu(linear(x, p.fc1)), p.fc2);
}

// ====== pixel shuffle ======

Tensor pixel_shuffle(const Tensor& x, int64_t r) {
  check_nchw(x, "pixel_shuffle");
  if (r < 1) throw ShapeError("pixel_shuffle: factor must be positive");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(c) +
                     " not divisible by r^2=" + std::to_string(r * r));
  }
  const int64_t co = c / (r * r), ho = h * r, wo = w * r;
  return map_index(x, {n, co, ho, wo}, "pixel_shuffle",
                   [=](int64_t o) -> int64_t {
                     const int64_t ox = o % wo;
                     const int64_t oy = (o / wo) % ho;
                     const int64_t ch = (o / (wo * ho)) % co;
                     const int64_t img = o / (wo * ho * co);
                     const int64_t iy = oy / r, ix = ox / r;
                     const int64_t sub = (oy % r) * r + (ox % r);
                     return ((img * c + ch * r * r + sub) * h + iy) * w + ix;
                   });
}

Tensor pixel_unshuffle(const Tensor& x, int64_t r) {
  check_nchw(x, "pixel_unshuffle");
  if (r < 1) throw ShapeError("pixel_unshuffle: factor must be positive");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % r != 0 || w % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial dims of " + shape_str(x.shape()) +
                     " not divisible by " + std::to_string(r));
  }
  const int64_t co = c * r * r, ho = h / r, wo = w / r;
  return map_index(x, {n, co, ho, wo}, "pixel_unshuffle",
                   [=](int64_t o) -> int64_t {
                     const int64_t ox = o % wo;
                     const int64_t oy = (o / wo) % ho;
                     const int64_t ch = (o / (wo * ho)) % co;
                     const int64_t img = o / (wo * ho * co);
                     const int64_t base = ch / (r * r);
                     const int64_t sub = ch % (r * r);
                     const int64_t iy = oy * r + sub / r;
                     const int64_t ix = ox * r + sub % r;
                     return ((img * (c) + base) * h + iy) * w + ix;
                   });
}

// ====== reflect padding ======

Tensor reflect_pad_br(const Tensor& x, int64_t pad_h, int64_t pad_w) {
  check_nchw(x, "reflect_pad");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (pad_h < 0 || pad_w < 0 || pad_h >= h || pad_w >= w) {
    throw ShapeError("reflect_pad: padding (" + std::to_string(pad_h) + ", " +
                     std::to_string(pad_w) + ") too large for " +
                     shape_str(x.shape()));
  }
  if (pad_h == 0 && pad_w == 0) return x;
  const int64_t ho = h + pad_h, wo = w + pad_w;
  return map_index(x, {n, c, ho, wo}, "reflect_pad",
                   [=](int64_t o) -> int64_t {
                     const int64_t ox = o % wo;
                     const int64_t oy = (o / wo) % ho;
                     const int64_t ch = (o / (wo * ho)) % c;
                     const int64_t img = o / (wo * ho * c);
                     // Mirror about the last row/col without repeating it.
                     const int64_t iy = oy < h ? oy : 2 * h - 2 - oy;
                     const int64_t ix = ox < w ? ox : 2 * w - 2 - ox;
                     return ((img * c + ch) * h + iy) * w + ix;
                   });
}

}  // namespace hat
