#pragma once

// Windowed multi-head self-attention, the shifted-window variant, and the
// overlapping cross-attention used around it.  Feature maps move through
// these functions in channels-last [N, H, W, C] layout so that window
// carving is a reshape+permute; token form is restored by the caller.

#include "hat/layers.hpp"

namespace hat {

// Learnable relative-position bias shared by both attention flavours.  The
// query window is win_q x win_q, the key window win_k x win_k (equal for
// plain window attention, larger for the overlapping variant).  Each head
// owns a (win_q + win_k - 1)^2 table addressed by the 2-D offset between
// query and key coordinates; the gather plan is frozen at creation.
struct RelPosBias {
  Tensor table;  // [heads, side * side], side = win_q + win_k - 1
  std::shared_ptr<const std::vector<std::int64_t>> index;  // heads*Tq*Tk plan
  std::int64_t heads = 0;
  std::int64_t win_q = 0;
  std::int64_t win_k = 0;

  static RelPosBias create(std::int64_t heads, std::int64_t win_q,
                           std::int64_t win_k, Rng& rng);

  // [heads, win_q^2, win_k^2] bias, differentiable into the table.
  Tensor lookup() const;
};

struct WmsaParams {
  LinearParams qkv;   // C -> 3C, fused query/key/value
  LinearParams proj;  // C -> C output projection
  RelPosBias bias;
  std::int64_t heads = 0;
  std::int64_t window = 0;

  static WmsaParams create(std::int64_t channels, std::int64_t heads,
                           std::int64_t window, Rng& rng);
};

struct OcaParams {
  LinearParams q;     // C -> C
  LinearParams kv;    // C -> 2C, projected before the overlap carve
  LinearParams proj;  // C -> C
  RelPosBias bias;
  std::int64_t heads = 0;
  std::int64_t window = 0;
  std::int64_t overlap = 0;  // extra margin on each side, ratio * window
  std::int64_t window_kv() const { return window + 2 * overlap; }

  static OcaParams create(std::int64_t channels, std::int64_t heads,
                          std::int64_t window, double overlap_ratio, Rng& rng);
};

// [N, H, W, C] -> [N*nH*nW, M*M, C]; windows and their tokens in row-major
// order.  H and W must be divisible by M.
Tensor window_partition(const Tensor& x, std::int64_t window);

// Inverse of window_partition for the given output geometry.
Tensor window_reverse(const Tensor& wins, std::int64_t window, std::int64_t n,
                      std::int64_t h, std::int64_t w);

// Cyclic shift over the two spatial dims: out[y][x] = in[y - sy][x - sx]
// with wraparound.  Negative shifts move content up/left.
Tensor roll2d(const Tensor& x, std::int64_t sy, std::int64_t sx);

// Additive attention mask [nH*nW, M^2, M^2] for a cyclically shifted grid:
// 0 where query and key came from the same pre-shift region, -1e9 across
// regions.  All zeros when shift == 0.
Tensor build_shift_mask(std::int64_t h, std::int64_t w, std::int64_t window,
                        std::int64_t shift);

// Overlapping key/value carve: one (M + 2*pad)^2 patch per M x M window,
// zero padded at the borders.  [N, H, W, C] -> [N*nH*nW, (M+2*pad)^2, C].
Tensor overlap_unfold(const Tensor& x, std::int64_t window, std::int64_t pad);

// Window attention over [N, H, W, C]; shift in [0, window) selects the
// shifted variant with its region mask.  Shape-preserving.
Tensor wmsa(const Tensor& x, const WmsaParams& p, std::int64_t shift);

// Overlapping cross-attention: queries from plain windows, keys/values from
// the enlarged patches around them.  Shape-preserving, never shifted.
Tensor oca(const Tensor& x, const OcaParams& p);

}  // namespace hat
