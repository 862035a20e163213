#include "hat/complexity.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace hat {

namespace {

using std::int64_t;

struct Cost {
  int64_t params = 0;
  int64_t macs = 0;
  Cost& operator+=(const Cost& o) {
    params += o.params;
    macs += o.macs;
    return *this;
  }
};

Cost conv_cost(int64_t cin, int64_t cout, int64_t k, int64_t out_hw) {
  return {k * k * cin * cout + cout, k * k * cin * cout * out_hw};
}

Cost depthwise_conv_cost(int64_t c, int64_t k, int64_t out_hw) {
  return {k * k * c + c, k * k * c * out_hw};
}

Cost linear_cost(int64_t in, int64_t out, int64_t tokens) {
  return {in * out + out, in * out * tokens};
}

Cost layer_norm_cost(int64_t c) { return {2 * c, 0}; }

// One attention application over `tokens` query tokens grouped into windows
// of tq tokens attending to tk keys each: the two batched products count,
// the softmax does not.  Also covers the bias table parameters.
Cost attention_cost(const ModelConfig& cfg, int64_t tokens, int64_t tq,
                    int64_t tk, int64_t side) {
  Cost c;
  c.params = cfg.num_heads * side * side;           // relative-position table
  c.macs = 2 * tokens * tk * cfg.embed_dim;         // QK^T and AV, all heads
  (void)tq;
  return c;
}

Cost ca_cost(const ModelConfig& cfg) {
  const int64_t c = cfg.embed_dim;
  const int64_t hidden = std::max<int64_t>(1, c / cfg.ca_reduction);
  Cost out;
  out += linear_cost(c, hidden, 1);
  out += linear_cost(hidden, c, 1);
  return out;
}

Cost cab_cost(const ModelConfig& cfg, int64_t hw) {
  const int64_t c = cfg.embed_dim;
  Cost out;
  if (cfg.cab_depthwise) {
    out += depthwise_conv_cost(c, 3, hw);
    out += depthwise_conv_cost(c, 3, hw);
  } else {
    out += conv_cost(c, c / cfg.cab_beta, 3, hw);
    out += conv_cost(c / cfg.cab_beta, c, 3, hw);
  }
  out += ca_cost(cfg);
  return out;
}

Cost mlp_cost(const ModelConfig& cfg, int64_t tokens) {
  const int64_t c = cfg.embed_dim;
  const int64_t hidden =
      static_cast<int64_t>(static_cast<double>(c) * cfg.mlp_ratio);
  Cost out;
  out += linear_cost(c, hidden, tokens);
  out += linear_cost(hidden, c, tokens);
  return out;
}

Cost hab_cost(const ModelConfig& cfg, int64_t hw) {
  const int64_t c = cfg.embed_dim, m = cfg.window_size;
  Cost out;
  out += layer_norm_cost(c);
  out += linear_cost(c, 3 * c, hw);                       // fused qkv
  out += attention_cost(cfg, hw, m * m, m * m, 2 * m - 1);
  out += linear_cost(c, c, hw);                           // projection
  if (cfg.enable_cab) out += cab_cost(cfg, hw);
  out += layer_norm_cost(c);
  out += mlp_cost(cfg, hw);
  return out;
}

Cost ocab_cost(const ModelConfig& cfg, int64_t hw) {
  const int64_t c = cfg.embed_dim, m = cfg.window_size;
  const int64_t margin =
      std::llround(cfg.oca_gamma * static_cast<double>(m));
  const int64_t mo = m + 2 * margin;
  Cost out;
  out += layer_norm_cost(c);
  out += linear_cost(c, c, hw);                           // queries
  out += linear_cost(c, 2 * c, hw);                       // keys/values
  out += attention_cost(cfg, hw, m * m, mo * mo, m + mo - 1);
  out += linear_cost(c, c, hw);
  out += layer_norm_cost(c);
  out += mlp_cost(cfg, hw);
  return out;
}

Cost rhag_cost(const ModelConfig& cfg, int64_t hw) {
  Cost out;
  for (int64_t b = 0; b < cfg.habs_per_rhag; ++b) out += hab_cost(cfg, hw);
  if (cfg.enable_ocab) out += ocab_cost(cfg, hw);
  out += conv_cost(cfg.embed_dim, cfg.embed_dim, 3, hw);
  return out;
}

Cost recon_cost(const ModelConfig& cfg, int64_t hw) {
  const int64_t f = cfg.recon_feat;
  Cost out;
  out += conv_cost(cfg.embed_dim, f, 3, hw);
  int64_t cur = hw;
  const std::vector<int64_t> factors =
      cfg.scale == 4 ? std::vector<int64_t>{2, 2}
                     : std::vector<int64_t>{cfg.scale};
  for (int64_t r : factors) {
    out += conv_cost(f, f * r * r, 3, cur);
    cur *= r * r;
  }
  out += conv_cost(f, cfg.in_channels, 3, cur);
  return out;
}

}  // namespace

ComplexityReport complexity_report(const ModelConfig& cfg, int64_t in_h,
                                   int64_t in_w) {
  cfg.validate();
  if (in_h < 1 || in_w < 1) {
    throw UsageError("complexity: input size must be positive");
  }
  const int64_t m = cfg.window_size;
  const int64_t hp = (in_h + m - 1) / m * m;  // forward pads to multiples
  const int64_t wp = (in_w + m - 1) / m * m;
  const int64_t hw = hp * wp;

  ComplexityReport rep;
  rep.input_h = in_h;
  rep.input_w = in_w;
  auto push = [&rep](const std::string& name, const Cost& c) {
    rep.rows.push_back({name, c.params, c.macs});
    rep.total_params += c.params;
    rep.total_macs += c.macs;
  };
  push("shallow", conv_cost(cfg.in_channels, cfg.embed_dim, 3, hw));
  const Cost group = rhag_cost(cfg, hw);
  for (int64_t g = 0; g < cfg.num_rhag; ++g) {
    push("groups." + std::to_string(g), group);
  }
  push("body_conv", conv_cost(cfg.embed_dim, cfg.embed_dim, 3, hw));
  push("reconstruction", recon_cost(cfg, hw));
  return rep;
}

std::int64_t count_params(const ModelConfig& cfg) {
  return complexity_report(cfg, cfg.window_size, cfg.window_size).total_params;
}

std::int64_t count_macs(const ModelConfig& cfg, int64_t in_h, int64_t in_w) {
  return complexity_report(cfg, in_h, in_w).total_macs;
}

std::string ComplexityReport::to_table() const {
  std::ostringstream os;
  std::size_t name_w = 12;
  for (const ComplexityRow& r : rows) name_w = std::max(name_w, r.name.size());
  auto line = [&](const std::string& name, const std::string& params,
                  const std::string& macs) {
    os << name;
    for (std::size_t i = name.size(); i < name_w + 2; ++i) os << ' ';
    for (std::size_t i = params.size(); i < 14; ++i) os << ' ';
    os << params << "  ";
    for (std::size_t i = macs.size(); i < 16; ++i) os << ' ';
    os << macs << '\n';
  };
  os << "multiply-adds counted at " << input_h << "x" << input_w << '\n';
  line("module", "params", "multiply-adds");
  for (const ComplexityRow& r : rows) {
    line(r.name, std::to_string(r.params), std::to_string(r.macs));
  }
  line("total", std::to_string(total_params), std::to_string(total_macs));
  return os.str();
}

std::string ComplexityReport::to_records() const {
  std::ostringstream os;
  for (const ComplexityRow& r : rows) {
    os << r.name << '\t' << r.params << '\t' << r.macs << '\n';
  }
  os << "total\t" << total_params << '\t' << total_macs << '\n';
  return os.str();
}

}  // namespace hat
