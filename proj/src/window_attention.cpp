#include "hat/window_attention.hpp"

#include <cmath>
#include <string>

namespace hat {

namespace {

using std::int64_t;

void check_spatial(const Tensor& x, const char* op) {
  if (x.ndim() != 4) {
    throw ShapeError(std::string(op) + ": expected [N,H,W,C], got " +
                     shape_str(x.shape()));
  }
}

int64_t positive_mod(int64_t a, int64_t m) { return ((a % m) + m) % m; }

}  // namespace

RelPosBias RelPosBias::create(int64_t heads, int64_t win_q, int64_t win_k,
                              Rng& rng) {
  if (heads < 1 || win_q < 1 || win_k < 1) {
    throw ConfigError("relative position bias: sizes must be positive");
  }
  RelPosBias b;
  b.heads = heads;
  b.win_q = win_q;
  b.win_k = win_k;
  const int64_t side = win_q + win_k - 1;
  b.table = Tensor({heads, side * side}, true);
  init_trunc_normal(b.table, rng, 0.02);

  // Offset (yq - yk, xq - xk) shifted by win_k - 1 lands in [0, side)^2.
  const int64_t tq = win_q * win_q, tk = win_k * win_k;
  auto idx = std::make_shared<std::vector<int64_t>>();
  idx->reserve(static_cast<std::size_t>(heads * tq * tk));
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t qy = 0; qy < win_q; ++qy)
      for (int64_t qx = 0; qx < win_q; ++qx)
        for (int64_t ky = 0; ky < win_k; ++ky)
          for (int64_t kx = 0; kx < win_k; ++kx) {
            const int64_t oy = qy - ky + win_k - 1;
            const int64_t ox = qx - kx + win_k - 1;
            idx->push_back(h * side * side + oy * side + ox);
          }
  }
  b.index = std::move(idx);
  return b;
}

Tensor RelPosBias::lookup() const {
  return take(table, index, {heads, win_q * win_q, win_k * win_k});
}

WmsaParams WmsaParams::create(int64_t channels, int64_t heads, int64_t window,
                              Rng& rng) {
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError("window attention: heads must divide channels");
  }
  WmsaParams p;
  p.qkv = LinearParams::create(channels, 3 * channels, rng);
  p.proj = LinearParams::create(channels, channels, rng);
  p.bias = RelPosBias::create(heads, window, window, rng);
  p.heads = heads;
  p.window = window;
  return p;
}

OcaParams OcaParams::create(int64_t channels, int64_t heads, int64_t window,
                            double overlap_ratio, Rng& rng) {
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError("overlap attention: heads must divide channels");
  }
  const double margin = overlap_ratio * static_cast<double>(window);
  const int64_t overlap = static_cast<int64_t>(std::llround(margin));
  if (overlap < 0 || std::abs(margin - static_cast<double>(overlap)) > 1e-9) {
    throw ConfigError(
        "overlap attention: overlap_ratio * window must be a whole number");
  }
  OcaParams p;
  p.q = LinearParams::create(channels, channels, rng);
  p.kv = LinearParams::create(channels, 2 * channels, rng);
  p.proj = LinearParams::create(channels, channels, rng);
  p.bias = RelPosBias::create(heads, window, window + 2 * overlap, rng);
  p.heads = heads;
  p.window = window;
  p.overlap = overlap;
  return p;
}

Tensor window_partition(const Tensor& x, int64_t window) {
  check_spatial(x, "window_partition");
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (window < 1 || h % window != 0 || w % window != 0) {
    throw ShapeError("window_partition: " + std::to_string(h) + "x" +
                     std::to_string(w) + " not divisible by window " +
                     std::to_string(window));
  }
  const int64_t nh = h / window, nw = w / window;
  Tensor t = reshape(x, {n, nh, window, nw, window, c});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {n * nh * nw, window * window, c});
}

Tensor window_reverse(const Tensor& wins, int64_t window, int64_t n, int64_t h,
                      int64_t w) {
  if (wins.ndim() != 3) {
    throw ShapeError("window_reverse: expected [B,T,C], got " +
                     shape_str(wins.shape()));
  }
  const int64_t nh = h / window, nw = w / window, c = wins.dim(2);
  if (h % window != 0 || w % window != 0 ||
      wins.dim(0) != n * nh * nw || wins.dim(1) != window * window) {
    throw ShapeError("window_reverse: windows do not tile the requested map");
  }
  Tensor t = reshape(wins, {n, nh, nw, window, window, c});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {n, h, w, c});
}

Tensor roll2d(const Tensor& x, int64_t sy, int64_t sx) {
  check_spatial(x, "roll2d");
  const int64_t h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (positive_mod(sy, h) == 0 && positive_mod(sx, w) == 0) {
    // Whole-period shift; still copy so callers may mutate independently.
    return map_index(x, x.shape(), "roll2d", [](int64_t i) { return i; });
  }
  return map_index(x, x.shape(), "roll2d", [=](int64_t i) {
    const int64_t ch = i % c;
    const int64_t xx = (i / c) % w;
    const int64_t yy = (i / (c * w)) % h;
    const int64_t img = i / (c * w * h);
    const int64_t src_y = positive_mod(yy - sy, h);
    const int64_t src_x = positive_mod(xx - sx, w);
    return ((img * h + src_y) * w + src_x) * c + ch;
  });
}

Tensor build_shift_mask(int64_t h, int64_t w, int64_t window, int64_t shift) {
  if (window < 1 || h % window != 0 || w % window != 0) {
    throw ShapeError("shift mask: map not divisible by window");
  }
  if (shift < 0 || shift >= window) {
    throw ConfigError("shift mask: shift must lie in [0, window)");
  }
  const int64_t nh = h / window, nw = w / window, t = window * window;
  Tensor mask = Tensor::zeros({nh * nw, t, t});
  if (shift == 0) return mask;

  // Label each cell by the pre-shift region it came from: rows and columns
  // split into [0, L-M), [L-M, L-shift), [L-shift, L) after the roll.
  auto band = [&](int64_t pos, int64_t extent) {
    if (pos < extent - window) return 0;
    if (pos < extent - shift) return 1;
    return 2;
  };
  std::vector<int> label(static_cast<std::size_t>(h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      label[static_cast<std::size_t>(y * w + x)] = band(y, h) * 3 + band(x, w);
    }
  real* m = mask.data();
  for (int64_t wy = 0; wy < nh; ++wy)
    for (int64_t wx = 0; wx < nw; ++wx) {
      const int64_t win = wy * nw + wx;
      for (int64_t a = 0; a < t; ++a)
        for (int64_t b = 0; b < t; ++b) {
          const int64_t ya = wy * window + a / window, xa = wx * window + a % window;
          const int64_t yb = wy * window + b / window, xb = wx * window + b % window;
          if (label[static_cast<std::size_t>(ya * w + xa)] !=
              label[static_cast<std::size_t>(yb * w + xb)]) {
            m[(win * t + a) * t + b] = static_cast<real>(-1e9);
          }
        }
    }
  return mask;
}

Tensor overlap_unfold(const Tensor& x, int64_t window, int64_t pad) {
  check_spatial(x, "overlap_unfold");
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (window < 1 || h % window != 0 || w % window != 0) {
    throw ShapeError("overlap_unfold: map not divisible by window");
  }
  if (pad < 0) throw ConfigError("overlap_unfold: negative pad");
  const int64_t nh = h / window, nw = w / window;
  const int64_t mo = window + 2 * pad, tk = mo * mo;
  return map_index(x, {n * nh * nw, tk, c}, "overlap_unfold", [=](int64_t i) {
    const int64_t ch = i % c;
    const int64_t tap = (i / c) % tk;
    const int64_t b = i / (c * tk);
    const int64_t wx = b % nw, wy = (b / nw) % nh, img = b / (nw * nh);
    const int64_t iy = wy * window - pad + tap / mo;
    const int64_t ix = wx * window - pad + tap % mo;
    if (iy < 0 || iy >= h || ix < 0 || ix >= w) return static_cast<int64_t>(-1);
    return ((img * h + iy) * w + ix) * c + ch;
  });
}

namespace {

// Shared attention core: q [B, Tq, C] against k/v [B, Tk, C] with a per-head
// relative bias and an optional per-window additive mask.
Tensor attention_core(const Tensor& q_in, const Tensor& k_in,
                      const Tensor& v_in, const RelPosBias& bias,
                      int64_t heads, const Tensor* mask, int64_t images) {
  const int64_t b = q_in.dim(0), tq = q_in.dim(1), c = q_in.dim(2);
  const int64_t tk = k_in.dim(1);
  const int64_t d = c / heads;

  auto split_heads = [&](const Tensor& t, int64_t tokens) {
    return permute(reshape(t, {b, tokens, heads, d}), {0, 2, 1, 3});
  };
  Tensor q = split_heads(q_in, tq);  // [B, heads, Tq, d]
  Tensor k = split_heads(k_in, tk);
  Tensor v = split_heads(v_in, tk);

  Tensor scores = matmul(q, transpose_last2(k));  // [B, heads, Tq, Tk]
  scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(d)));
  scores = add(scores, reshape(bias.lookup(), {1, heads, tq, tk}));
  if (mask != nullptr) {
    const int64_t win_per_image = b / images;
    scores = reshape(scores, {images, win_per_image, heads, tq, tk});
    scores = add(scores, reshape(*mask, {1, win_per_image, 1, tq, tk}));
    scores = reshape(scores, {b, heads, tq, tk});
  }
  Tensor attn = softmax_lastdim(scores);
  Tensor out = matmul(attn, v);                    // [B, heads, Tq, d]
  return reshape(permute(out, {0, 2, 1, 3}), {b, tq, c});
}

}  // namespace

Tensor wmsa(const Tensor& x, const WmsaParams& p, int64_t shift) {
  check_spatial(x, "window attention");
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (shift < 0 || shift >= p.window) {
    throw ConfigError("window attention: shift must lie in [0, window)");
  }
  Tensor shifted = shift > 0 ? roll2d(x, -shift, -shift) : x;
  Tensor wins = window_partition(shifted, p.window);  // [B, T, C]
  Tensor qkv = linear(wins, p.qkv);                   // [B, T, 3C]
  const int64_t bwin = wins.dim(0), t = wins.dim(1);
  Tensor q = slice(qkv, {0, 0, 0}, {bwin, t, c});
  Tensor k = slice(qkv, {0, 0, c}, {bwin, t, 2 * c});
  Tensor v = slice(qkv, {0, 0, 2 * c}, {bwin, t, 3 * c});

  Tensor mask;
  if (shift > 0) mask = build_shift_mask(h, w, p.window, shift);
  Tensor merged = attention_core(q, k, v, p.bias, p.heads,
                                 shift > 0 ? &mask : nullptr, n);
  Tensor out = linear(merged, p.proj);
  out = window_reverse(out, p.window, n, h, w);
  if (shift > 0) out = roll2d(out, shift, shift);
  return out;
}

Tensor oca(const Tensor& x, const OcaParams& p) {
  check_spatial(x, "overlap attention");
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor q_map = linear(x, p.q);    // [N, H, W, C]; linear acts on last dim
  Tensor kv_map = linear(x, p.kv);  // [N, H, W, 2C], carved after projection
  Tensor q = window_partition(q_map, p.window);  // [B, T, C]
  Tensor kv = overlap_unfold(kv_map, p.window, p.overlap);  // [B, Tk, 2C]
  const int64_t bwin = kv.dim(0), tk = kv.dim(1);
  Tensor k = slice(kv, {0, 0, 0}, {bwin, tk, c});
  Tensor v = slice(kv, {0, 0, c}, {bwin, tk, 2 * c});

  Tensor merged = attention_core(q, k, v, p.bias, p.heads, nullptr, n);
  Tensor out = linear(merged, p.proj);
  return window_reverse(out, p.window, n, h, w);
}

}  // namespace hat
