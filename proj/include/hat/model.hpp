#pragma once

// The full super-resolution network: a shallow conv front end, a deep stack
// of residual hybrid attention groups, and a pixel-shuffle reconstruction
// tail with a global residual from the shallow features.

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hat/window_attention.hpp"

namespace hat {

struct ModelConfig {
  std::int64_t in_channels = 3;
  std::int64_t embed_dim = 180;     // C, the working channel width
  std::int64_t num_rhag = 6;        // residual groups
  std::int64_t habs_per_rhag = 6;   // attention blocks per group
  std::int64_t window_size = 16;    // M
  std::int64_t num_heads = 6;
  double alpha = 0.01;              // weight on the conv branch inside a block
  std::int64_t cab_beta = 3;        // channel squeeze inside the conv branch
  double oca_gamma = 0.5;           // overlap ratio of the cross-attention
  double mlp_ratio = 2.0;
  std::int64_t ca_reduction = 16;   // squeeze of the channel-attention gate
  std::int64_t scale = 4;           // 2, 3 or 4
  std::int64_t recon_feat = 64;     // feature width of the upsampling tail
  bool enable_cab = true;
  bool enable_ocab = true;
  bool cab_depthwise = false;

  // Throws ConfigError on any violated invariant.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Ordered name -> tensor map over every learnable parameter.  Handles share
// storage with the model, so writes through the tree reach the network.
class ParamTree {
 public:
  void add(const std::string& name, const Tensor& t);
  const Tensor* find(const std::string& name) const;  // nullptr when absent
  const Tensor& get(const std::string& name) const;   // throws InternalError
  std::size_t size() const { return items_.size(); }
  std::int64_t total_scalars() const;

  using const_iterator =
      std::vector<std::pair<std::string, Tensor>>::const_iterator;
  const_iterator begin() const { return items_.begin(); }
  const_iterator end() const { return items_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct HabParams {
  LayerNormParams ln1, ln2;
  WmsaParams attn;
  CabParams cab;  // untouched when has_cab is false
  MlpParams mlp;
  std::int64_t shift = 0;
  double alpha = 0.01;
  bool has_cab = true;
};

struct OcabParams {
  LayerNormParams ln1, ln2;
  OcaParams attn;
  MlpParams mlp;
};

struct RhagParams {
  std::vector<HabParams> habs;
  OcabParams ocab;  // untouched when has_ocab is false
  Conv2dParams conv;
  bool has_ocab = true;
};

// Blocks operate on token sequences [N, H*W, C] with the spatial extent
// passed alongside; attention reshapes to [N, H, W, C] internally and the
// conv branch to NCHW.
Tensor hab_forward(const Tensor& tokens, std::int64_t h, std::int64_t w,
                   const HabParams& p);
Tensor ocab_forward(const Tensor& tokens, std::int64_t h, std::int64_t w,
                    const OcabParams& p);
Tensor rhag_forward(const Tensor& tokens, std::int64_t h, std::int64_t w,
                    const RhagParams& p);

class HatModel {
 public:
  static HatModel create(const ModelConfig& cfg, Rng& rng);

  // [N, in_channels, h, w] -> [N, in_channels, h*scale, w*scale].  Inputs
  // are reflect-padded up to window multiples internally and the output is
  // cropped back, so any h, w the padder can mirror are accepted.
  Tensor forward(const Tensor& img) const;

  // Same, additionally copying the feature map after the given group
  // (1-based) into *captured as [N, C, h, w], cropped to the input extent.
  // capture_after_group == 0 captures nothing.
  Tensor forward(const Tensor& img, int capture_after_group,
                 Tensor* captured) const;

  // Deterministically ordered view of every learnable tensor.
  ParamTree params() const;

  const ModelConfig& config() const { return cfg_; }

  ModelConfig cfg_;
  Conv2dParams shallow;            // in_channels -> C
  std::vector<RhagParams> groups;
  Conv2dParams body_conv;          // C -> C after the last group
  Conv2dParams recon_pre;          // C -> recon_feat
  std::vector<Conv2dParams> upsample;        // recon_feat -> recon_feat*r^2
  std::vector<std::int64_t> upsample_factor; // shuffle factor per stage
  Conv2dParams recon_last;         // recon_feat -> in_channels
};

}  // namespace hat
