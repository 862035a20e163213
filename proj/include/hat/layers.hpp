#ifndef HAT_LAYERS_HPP
#define HAT_LAYERS_HPP

// Neural building blocks: linear, conv (via im2col + gemm), layer norm,
// channel attention, the convolution block it feeds, token MLP, pixel
// (un)shuffle and spatial padding helpers.
//
// Layout conventions: image features are NCHW, token sequences are
// [N, tokens, C].  Every parameter struct exposes create() which initializes
// deterministically from the caller's Rng.

#include <cstdint>

#include "hat/tensor.hpp"

namespace hat {

// ====== parameter init ======

enum class Init {
  kTruncNormal,      // normal(0, 0.02) clipped to two sigma
  kKaimingUniform,   // uniform(+-1/sqrt(fan_in))
};

void init_trunc_normal(Tensor& t, Rng& rng, double stddev = 0.02);
void init_kaiming_uniform(Tensor& t, Rng& rng, std::int64_t fan_in);

// ====== linear ======

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
  static LinearParams create(std::int64_t in, std::int64_t out, Rng& rng);
};

// [..., in] -> [..., out]
Tensor linear(const Tensor& x, const LinearParams& p);

// ====== conv2d ======

struct Conv2dParams {
  Tensor weight;  // [out, in/groups, k, k]
  Tensor bias;    // [out]
  std::int64_t stride = 1;
  std::int64_t pad = 0;     // zero padding on all four sides
  std::int64_t groups = 1;  // 1 (dense) or C (depth-wise); nothing between
  static Conv2dParams create(std::int64_t in, std::int64_t out, std::int64_t k,
                             std::int64_t stride, std::int64_t pad, Init init,
                             Rng& rng);
  // One k x k filter per channel; weight [C, 1, k, k].
  static Conv2dParams create_depthwise(std::int64_t c, std::int64_t k,
                                       std::int64_t stride, std::int64_t pad,
                                       Rng& rng);
};

// [N, Cin, H, W] -> [N, Cout, Ho, Wo] with Ho = (H + 2 pad - k) / stride + 1.
Tensor conv2d(const Tensor& x, const Conv2dParams& p);

// ====== layer norm ======

struct LayerNormParams {
  Tensor gamma;  // [C], ones
  Tensor beta;   // [C], zeros
  double eps = 1e-5;
  static LayerNormParams create(std::int64_t c);
};

// Normalizes the last dim to zero mean / unit variance, then applies the
// affine pair.  Fused forward/backward.
Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

// ====== channel attention ======

struct ChannelAttentionParams {
  // 1x1 convs stored as linear weights over the channel dim.
  Tensor down_w;  // [hidden, C]
  Tensor down_b;  // [hidden]
  Tensor up_w;    // [C, hidden]
  Tensor up_b;    // [C]
  // hidden = C / reduction (floored, at least 1).
  static ChannelAttentionParams create(std::int64_t c, std::int64_t reduction,
                                       Rng& rng);
};

// x * sigmoid(up(relu(down(gap(x))))), gap = global average pool.  NCHW.
Tensor channel_attention(const Tensor& x, const ChannelAttentionParams& p);

// ====== channel attention block ======

struct CabParams {
  Conv2dParams conv1;  // 3x3, C -> C/beta (depth-wise: C -> C, one filter/ch)
  Conv2dParams conv2;  // 3x3, C/beta -> C
  ChannelAttentionParams ca;
  // Throws ConfigError unless beta divides C.  The depthwise variant swaps
  // both convolutions for per-channel ones and drops the squeeze.
  static CabParams create(std::int64_t c, std::int64_t beta,
                          std::int64_t reduction, Rng& rng,
                          bool depthwise = false);
};

// ca(conv2(gelu(conv1(x)))).  NCHW in and out, same shape.
Tensor cab_forward(const Tensor& x, const CabParams& p);

// ====== token MLP ======

struct MlpParams {
  LinearParams fc1;  // C -> C * ratio
  LinearParams fc2;  // C * ratio -> C
  // Throws ConfigError unless C * ratio is an integer.
  static MlpParams create(std::int64_t c, double ratio, Rng& rng);
};

// fc2(gelu(fc1(x))) over the last dim.
Tensor mlp(const Tensor& x, const MlpParams& p);

// ====== pixel shuffle ======

// [N, C*r^2, H, W] -> [N, C, H*r, W*r]; out[n][c][h*r+i][w*r+j] comes from
// channel c*r^2 + i*r + j.  pixel_unshuffle is its exact inverse.
Tensor pixel_shuffle(const Tensor& x, std::int64_t r);
Tensor pixel_unshuffle(const Tensor& x, std::int64_t r);

// ====== spatial padding ======

// Pads the bottom/right of an NCHW map by edge mirroring without repeating
// the border row/col.  pad_h must be < H and pad_w < W.
Tensor reflect_pad_br(const Tensor& x, std::int64_t pad_h, std::int64_t pad_w);

}  // namespace hat

#endif  // HAT_LAYERS_HPP
