#include "hat/model.hpp"

#include <cmath>

namespace hat {

namespace {

using std::int64_t;

Tensor tokens_to_spatial(const Tensor& tokens, int64_t h, int64_t w) {
  return reshape(tokens, {tokens.dim(0), h, w, tokens.dim(2)});
}

Tensor spatial_to_tokens(const Tensor& spatial) {
  return reshape(spatial, {spatial.dim(0), spatial.dim(1) * spatial.dim(2),
                           spatial.dim(3)});
}

Tensor tokens_to_nchw(const Tensor& tokens, int64_t h, int64_t w) {
  return permute(tokens_to_spatial(tokens, h, w), {0, 3, 1, 2});
}

Tensor nchw_to_tokens(const Tensor& x) {
  return spatial_to_tokens(permute(x, {0, 2, 3, 1}));
}

void check_tokens(const Tensor& t, int64_t h, int64_t w, const char* op) {
  if (t.ndim() != 3 || t.dim(1) != h * w) {
    throw ShapeError(std::string(op) + ": tokens " + shape_str(t.shape()) +
                     " do not cover a " + std::to_string(h) + "x" +
                     std::to_string(w) + " map");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (in_channels < 1) throw ConfigError("config: in_channels must be >= 1");
  if (embed_dim < 1 || num_rhag < 1 || habs_per_rhag < 1 || window_size < 1 ||
      recon_feat < 1) {
    throw ConfigError("config: structural sizes must be positive");
  }
  if (num_heads < 1 || embed_dim % num_heads != 0) {
    throw ConfigError("config: heads " + std::to_string(num_heads) +
                      " must divide embed_dim " + std::to_string(embed_dim));
  }
  if (cab_beta < 1 || embed_dim % cab_beta != 0) {
    throw ConfigError("config: cab_beta " + std::to_string(cab_beta) +
                      " must divide embed_dim " + std::to_string(embed_dim));
  }
  const double margin = oca_gamma * static_cast<double>(window_size);
  if (margin < 0 ||
      std::abs(margin - std::llround(margin)) > 1e-9) {
    throw ConfigError("config: oca_gamma * window_size must be a whole number");
  }
  if (scale != 2 && scale != 3 && scale != 4) {
    throw ConfigError("config: scale must be 2, 3 or 4, got " +
                      std::to_string(scale));
  }
  const double hidden = static_cast<double>(embed_dim) * mlp_ratio;
  if (hidden < 1 || hidden != std::floor(hidden)) {
    throw ConfigError("config: embed_dim * mlp_ratio must be a whole number");
  }
  if (ca_reduction < 1) throw ConfigError("config: ca_reduction must be >= 1");
}

// ====== parameter tree ======

void ParamTree::add(const std::string& name, const Tensor& t) {
  if (!t.defined()) throw InternalError("param tree: undefined tensor " + name);
  if (index_.count(name) != 0) {
    throw InternalError("param tree: duplicate name " + name);
  }
  index_.emplace(name, items_.size());
  items_.emplace_back(name, t);
}

const Tensor* ParamTree::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second].second;
}

const Tensor& ParamTree::get(const std::string& name) const {
  const Tensor* t = find(name);
  if (t == nullptr) throw InternalError("param tree: no parameter " + name);
  return *t;
}

std::int64_t ParamTree::total_scalars() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

// ====== blocks ======

Tensor hab_forward(const Tensor& tokens, int64_t h, int64_t w,
                   const HabParams& p) {
  check_tokens(tokens, h, w, "hab");
  Tensor y = layer_norm(tokens, p.ln1);
  Tensor spatial = tokens_to_spatial(y, h, w);
  Tensor attn = spatial_to_tokens(wmsa(spatial, p.attn, p.shift));
  Tensor x = add(tokens, attn);
  if (p.has_cab && p.alpha != 0.0) {
    Tensor conv_branch = cab_forward(permute(spatial, {0, 3, 1, 2}), p.cab);
    x = add(x, scale(nchw_to_tokens(conv_branch), p.alpha));
  }
  return add(x, mlp(layer_norm(x, p.ln2), p.mlp));
}

Tensor ocab_forward(const Tensor& tokens, int64_t h, int64_t w,
                    const OcabParams& p) {
  check_tokens(tokens, h, w, "ocab");
  Tensor y = layer_norm(tokens, p.ln1);
  Tensor attn = spatial_to_tokens(oca(tokens_to_spatial(y, h, w), p.attn));
  Tensor x = add(tokens, attn);
  return add(x, mlp(layer_norm(x, p.ln2), p.mlp));
}

Tensor rhag_forward(const Tensor& tokens, int64_t h, int64_t w,
                    const RhagParams& p) {
  check_tokens(tokens, h, w, "rhag");
  Tensor x = tokens;
  for (const HabParams& hab : p.habs) x = hab_forward(x, h, w, hab);
  if (p.has_ocab) x = ocab_forward(x, h, w, p.ocab);
  Tensor conv = nchw_to_tokens(conv2d(tokens_to_nchw(x, h, w), p.conv));
  return add(conv, tokens);
}

// ====== model assembly ======

HatModel HatModel::create(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const int64_t c = cfg.embed_dim, m = cfg.window_size;
  HatModel model;
  model.cfg_ = cfg;
  model.shallow = Conv2dParams::create(cfg.in_channels, c, 3, 1, 1,
                                       Init::kTruncNormal, rng);
  model.groups.reserve(static_cast<std::size_t>(cfg.num_rhag));
  for (int64_t g = 0; g < cfg.num_rhag; ++g) {
    RhagParams group;
    group.habs.reserve(static_cast<std::size_t>(cfg.habs_per_rhag));
    for (int64_t b = 0; b < cfg.habs_per_rhag; ++b) {
      HabParams hab;
      hab.ln1 = LayerNormParams::create(c);
      hab.attn = WmsaParams::create(c, cfg.num_heads, m, rng);
      hab.has_cab = cfg.enable_cab;
      if (cfg.enable_cab) {
        hab.cab = CabParams::create(c, cfg.cab_beta, cfg.ca_reduction, rng,
                                    cfg.cab_depthwise);
      }
      hab.ln2 = LayerNormParams::create(c);
      hab.mlp = MlpParams::create(c, cfg.mlp_ratio, rng);
      hab.alpha = cfg.alpha;
      // Alternate plain and shifted attention, starting plain.
      hab.shift = (b % 2 == 0) ? 0 : m / 2;
      group.habs.push_back(std::move(hab));
    }
    group.has_ocab = cfg.enable_ocab;
    if (cfg.enable_ocab) {
      group.ocab.ln1 = LayerNormParams::create(c);
      group.ocab.attn =
          OcaParams::create(c, cfg.num_heads, m, cfg.oca_gamma, rng);
      group.ocab.ln2 = LayerNormParams::create(c);
      group.ocab.mlp = MlpParams::create(c, cfg.mlp_ratio, rng);
    }
    group.conv = Conv2dParams::create(c, c, 3, 1, 1, Init::kTruncNormal, rng);
    model.groups.push_back(std::move(group));
  }
  model.body_conv = Conv2dParams::create(c, c, 3, 1, 1, Init::kTruncNormal, rng);
  model.recon_pre = Conv2dParams::create(c, cfg.recon_feat, 3, 1, 1,
                                         Init::kTruncNormal, rng);
  // x4 runs two x2 shuffle stages; x2 and x3 take a single stage.
  const std::vector<int64_t> factors =
      cfg.scale == 4 ? std::vector<int64_t>{2, 2} : std::vector<int64_t>{cfg.scale};
  for (int64_t r : factors) {
    model.upsample.push_back(Conv2dParams::create(cfg.recon_feat,
                                                  cfg.recon_feat * r * r, 3, 1,
                                                  1, Init::kTruncNormal, rng));
    model.upsample_factor.push_back(r);
  }
  model.recon_last = Conv2dParams::create(cfg.recon_feat, cfg.in_channels, 3, 1,
                                          1, Init::kTruncNormal, rng);
  return model;
}

Tensor HatModel::forward(const Tensor& img) const {
  return forward(img, 0, nullptr);
}

Tensor HatModel::forward(const Tensor& img, int capture_after_group,
                         Tensor* captured) const {
  if (!img.defined() || img.ndim() != 4 || img.dim(1) != cfg_.in_channels) {
    throw ShapeError("forward: expected [N," + std::to_string(cfg_.in_channels) +
                     ",h,w] image, got " +
                     (img.defined() ? shape_str(img.shape()) : "undefined"));
  }
  if (capture_after_group < 0 ||
      capture_after_group > static_cast<int>(groups.size())) {
    throw UsageError("forward: capture group " +
                     std::to_string(capture_after_group) + " out of range 1.." +
                     std::to_string(groups.size()));
  }
  const int64_t n = img.dim(0), h = img.dim(2), w = img.dim(3);
  const int64_t m = cfg_.window_size;
  const int64_t pad_h = (m - h % m) % m, pad_w = (m - w % m) % m;
  Tensor padded = reflect_pad_br(img, pad_h, pad_w);  // throws if unmirrorable
  const int64_t hp = h + pad_h, wp = w + pad_w;

  Tensor f0 = conv2d(padded, shallow);  // [N, C, Hp, Wp]
  Tensor x = nchw_to_tokens(f0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    x = rhag_forward(x, hp, wp, groups[g]);
    if (captured != nullptr &&
        static_cast<int>(g) + 1 == capture_after_group) {
      Tensor feat = tokens_to_nchw(x, hp, wp).detach_copy();
      *captured = slice(feat, {0, 0, 0, 0}, {n, cfg_.embed_dim, h, w});
    }
  }
  Tensor body = conv2d(tokens_to_nchw(x, hp, wp), body_conv);
  Tensor feat = add(body, f0);

  Tensor r = leaky_relu(conv2d(feat, recon_pre), 0.01);
  for (std::size_t s = 0; s < upsample.size(); ++s) {
    r = pixel_shuffle(conv2d(r, upsample[s]), upsample_factor[s]);
  }
  Tensor out = conv2d(r, recon_last);
  const int64_t sc = cfg_.scale;
  if (pad_h == 0 && pad_w == 0) return out;
  return slice(out, {0, 0, 0, 0}, {n, cfg_.in_channels, h * sc, w * sc});
}

namespace {

void add_linear(ParamTree& t, const std::string& prefix,
                const LinearParams& p) {
  t.add(prefix + ".weight", p.weight);
  t.add(prefix + ".bias", p.bias);
}

void add_conv(ParamTree& t, const std::string& prefix, const Conv2dParams& p) {
  t.add(prefix + ".weight", p.weight);
  t.add(prefix + ".bias", p.bias);
}

void add_ln(ParamTree& t, const std::string& prefix,
            const LayerNormParams& p) {
  t.add(prefix + ".gamma", p.gamma);
  t.add(prefix + ".beta", p.beta);
}

void add_mlp(ParamTree& t, const std::string& prefix, const MlpParams& p) {
  add_linear(t, prefix + ".fc1", p.fc1);
  add_linear(t, prefix + ".fc2", p.fc2);
}

}  // namespace

ParamTree HatModel::params() const {
  ParamTree t;
  add_conv(t, "shallow", shallow);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const std::string gp = "groups." + std::to_string(g);
    const RhagParams& group = groups[g];
    for (std::size_t b = 0; b < group.habs.size(); ++b) {
      const std::string bp = gp + ".habs." + std::to_string(b);
      const HabParams& hab = group.habs[b];
      add_ln(t, bp + ".ln1", hab.ln1);
      add_linear(t, bp + ".attn.qkv", hab.attn.qkv);
      add_linear(t, bp + ".attn.proj", hab.attn.proj);
      t.add(bp + ".attn.relpos.table", hab.attn.bias.table);
      if (hab.has_cab) {
        add_conv(t, bp + ".cab.conv1", hab.cab.conv1);
        add_conv(t, bp + ".cab.conv2", hab.cab.conv2);
        t.add(bp + ".cab.ca.down.weight", hab.cab.ca.down_w);
        t.add(bp + ".cab.ca.down.bias", hab.cab.ca.down_b);
        t.add(bp + ".cab.ca.up.weight", hab.cab.ca.up_w);
        t.add(bp + ".cab.ca.up.bias", hab.cab.ca.up_b);
      }
      add_ln(t, bp + ".ln2", hab.ln2);
      add_mlp(t, bp + ".mlp", hab.mlp);
    }
    if (group.has_ocab) {
      const std::string op = gp + ".ocab";
      add_ln(t, op + ".ln1", group.ocab.ln1);
      add_linear(t, op + ".attn.q", group.ocab.attn.q);
      add_linear(t, op + ".attn.kv", group.ocab.attn.kv);
      add_linear(t, op + ".attn.proj", group.ocab.attn.proj);
      t.add(op + ".attn.relpos.table", group.ocab.attn.bias.table);
      add_ln(t, op + ".ln2", group.ocab.ln2);
      add_mlp(t, op + ".mlp", group.ocab.mlp);
    }
    add_conv(t, gp + ".conv", group.conv);
  }
  add_conv(t, "body", body_conv);
  add_conv(t, "recon.pre", recon_pre);
  for (std::size_t s = 0; s < upsample.size(); ++s) {
    // Scale-tagged so checkpoints for one scale never feed another's tail.
    add_conv(t,
             "recon.upsample_x" + std::to_string(cfg_.scale) + "." +
                 std::to_string(s),
             upsample[s]);
  }
  add_conv(t, "recon.last", recon_last);
  return t;
}

}  // namespace hat
