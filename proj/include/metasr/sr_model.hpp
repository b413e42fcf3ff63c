#pragma once

// Post-upsampling super-resolution backbones: head conv, residual groups of
// residual blocks (optional channel attention), body conv with a long skip,
// pixel-shuffle upsampler, tail conv back to RGB. Group outputs are exposed
// as tap features for distillation.

#include <cctype>
#include <string>
#include <vector>

#include "metasr/conv.hpp"
#include "metasr/nn.hpp"

namespace metasr {

struct NetConfig {
  int64_t n_groups = 4;
  int64_t n_blocks = 4;
  int64_t n_feats = 32;
  int64_t scale = 2;
  bool use_channel_attention = true;
  int64_t n_taps = 4;
  int64_t attention_reduction = 4;

  void validate() const {
    if (n_groups < 1 || n_blocks < 1 || n_feats < 1)
      throw ConfigError("network counts must be >= 1");
    if (scale != 2 && scale != 3 && scale != 4)
      throw ConfigError("scale must be 2, 3 or 4, got " + std::to_string(scale));
    if (n_taps < 1 || n_taps > n_groups)
      throw ConfigError("n_taps must be in [1, n_groups], got " + std::to_string(n_taps));
    if (attention_reduction < 1) throw ConfigError("attention_reduction must be >= 1");
  }

  int64_t attention_mid() const { return std::max<int64_t>(1, n_feats / attention_reduction); }

  std::vector<int64_t> upsample_stages() const {
    if (scale == 4) return {2, 2};
    return {scale};
  }
};

// Published size triples, addressable by name.
inline NetConfig net_preset(const std::string& name) {
  NetConfig c;
  std::string n;
  for (char ch : name) n += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (n == "rcan-t" || n == "rcan_t") {
    c.n_groups = 10; c.n_blocks = 20; c.n_feats = 64;
  } else if (n == "rcan-a" || n == "rcan_a") {
    c.n_groups = 4; c.n_blocks = 1; c.n_feats = 16;
  } else if (n == "rcan-b" || n == "rcan_b") {
    c.n_groups = 4; c.n_blocks = 4; c.n_feats = 16;
  } else if (n == "rcan-c" || n == "rcan_c") {
    c.n_groups = 4; c.n_blocks = 4; c.n_feats = 32;
  } else {
    throw ConfigError("unknown network preset " + name);
  }
  return c;
}

struct Network {
  NetConfig config;
  ParamSet params;
};

// Tap positions: evenly spaced over the groups, last tap at the final group.
inline std::vector<int64_t> tap_indices(int64_t n_groups, int64_t n_taps) {
  if (n_taps < 1 || n_taps > n_groups) throw ConfigError("invalid tap count");
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(n_taps));
  for (int64_t i = 1; i <= n_taps; ++i) idx.push_back(i * n_groups / n_taps - 1);
  return idx;
}

inline Network build_network(const NetConfig& cfg, uint64_t seed) {
  cfg.validate();
  Network net{cfg, {}};
  Rng rng(seed);
  ParamSet& ps = net.params;
  const int64_t c = cfg.n_feats;
  add_conv(ps, "head", c, 3, 3, rng);
  for (int64_t g = 0; g < cfg.n_groups; ++g) {
    const std::string gp = "g" + std::to_string(g);
    for (int64_t b = 0; b < cfg.n_blocks; ++b) {
      const std::string bp = gp + ".b" + std::to_string(b);
      add_conv(ps, bp + ".c1", c, c, 3, rng);
      add_conv(ps, bp + ".c2", c, c, 3, rng);
      if (cfg.use_channel_attention) {
        add_conv(ps, bp + ".a1", cfg.attention_mid(), c, 1, rng);
        add_conv(ps, bp + ".a2", c, cfg.attention_mid(), 1, rng);
      }
    }
    add_conv(ps, gp + ".tail", c, c, 3, rng);
  }
  add_conv(ps, "body", c, c, 3, rng);
  const auto stages = cfg.upsample_stages();
  for (size_t u = 0; u < stages.size(); ++u)
    add_conv(ps, "up" + std::to_string(u), c * stages[u] * stages[u], c, 3, rng);
  add_conv(ps, "tail", 3, c, 3, rng);
  return net;
}

// Gate each channel by a sigmoid of its pooled descriptor.
inline Var channel_gate(const ParamSet& ps, const std::string& prefix, const Var& x) {
  Var d = adaptive_avg_pool(x, 1, 1);
  d = apply_conv(ps, prefix + ".a1", d, 0);
  d = apply_conv(ps, prefix + ".a2", relu(d), 0);
  return mul(x, sigmoid(d));
}

struct SrOutput {
  Var sr;
  std::vector<Var> taps;
};

// Forward pass collecting the configured tap features. Parameters are passed
// separately so unrolled (graph-connected) parameter sets can be pushed
// through the same definition.
inline SrOutput forward_with_taps(const ParamSet& ps, const NetConfig& cfg, const Var& x) {
  if (x.shape().size() != 4 || x.shape()[1] != 3)
    throw ShapeError("network input wants (n,3,h,w), got " + shape_str(x.shape()));
  const auto taps_at = tap_indices(cfg.n_groups, cfg.n_taps);
  SrOutput out;
  Var h0 = apply_conv(ps, "head", x, 1);
  Var f = h0;
  size_t next_tap = 0;
  for (int64_t g = 0; g < cfg.n_groups; ++g) {
    const std::string gp = "g" + std::to_string(g);
    Var gin = f;
    for (int64_t b = 0; b < cfg.n_blocks; ++b) {
      const std::string bp = gp + ".b" + std::to_string(b);
      Var t = apply_conv(ps, bp + ".c1", f, 1);
      t = apply_conv(ps, bp + ".c2", relu(t), 1);
      if (cfg.use_channel_attention) t = channel_gate(ps, bp, t);
      f = add(f, t);
    }
    f = add(gin, apply_conv(ps, gp + ".tail", f, 1));
    if (next_tap < taps_at.size() && taps_at[next_tap] == g) {
      out.taps.push_back(f);
      ++next_tap;
    }
  }
  Var body = add(h0, apply_conv(ps, "body", f, 1));
  Var u = body;
  const auto stages = cfg.upsample_stages();
  for (size_t s = 0; s < stages.size(); ++s)
    u = pixel_shuffle(apply_conv(ps, "up" + std::to_string(s), u, 1), stages[s]);
  out.sr = apply_conv(ps, "tail", u, 1);
  return out;
}

inline Var forward(const ParamSet& ps, const NetConfig& cfg, const Var& x) {
  return forward_with_taps(ps, cfg, x).sr;
}

inline Var forward(const Network& net, const Var& x) {
  return forward_with_taps(net.params, net.config, x).sr;
}

inline int64_t param_count(const Network& net) { return net.params.total_elements(); }

// Closed-form parameter total from the layer shapes alone.
inline int64_t expected_param_count(const NetConfig& cfg) {
  const int64_t c = cfg.n_feats, cm = cfg.attention_mid();
  int64_t n = conv_param_count(3, c, 3);
  int64_t per_block = 2 * conv_param_count(c, c, 3);
  if (cfg.use_channel_attention)
    per_block += conv_param_count(c, cm, 1) + conv_param_count(cm, c, 1);
  n += cfg.n_groups * (cfg.n_blocks * per_block + conv_param_count(c, c, 3));
  n += conv_param_count(c, c, 3);
  for (int64_t s : cfg.upsample_stages()) n += conv_param_count(c, c * s * s, 3);
  n += conv_param_count(c, 3, 3);
  return n;
}

// 2*k^2*c_in*c_out per output position, summed over every conv at the
// spatial size it runs at for an h x w input.
inline int64_t flops_estimate(const NetConfig& cfg, int64_t h, int64_t w) {
  const int64_t c = cfg.n_feats, cm = cfg.attention_mid();
  double fl = conv_flops(3, 3, c, h, w);
  double per_block = 2.0 * conv_flops(3, c, c, h, w);
  if (cfg.use_channel_attention)
    per_block += conv_flops(1, c, cm, 1, 1) + conv_flops(1, cm, c, 1, 1);
  fl += static_cast<double>(cfg.n_groups) *
        (static_cast<double>(cfg.n_blocks) * per_block + conv_flops(3, c, c, h, w));
  fl += conv_flops(3, c, c, h, w);
  int64_t ch = h, cw = w;
  for (int64_t s : cfg.upsample_stages()) {
    fl += conv_flops(3, c, c * s * s, ch, cw);
    ch *= s;
    cw *= s;
  }
  fl += conv_flops(3, c, 3, ch, cw);
  return static_cast<int64_t>(fl);
}

}  // namespace metasr
