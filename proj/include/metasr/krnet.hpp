#pragma once

// Knowledge-representation network: turns teacher and student tap features
// into comparable descriptors. Student taps are lifted to teacher width by a
// two-conv dimension matcher; a channel-correlation step mixes student
// channels into teacher-channel rows; two generator blocks pool the mixed
// feature into per-sample dynamic kernels; both branches are convolved with
// the same generated kernel pair and compared under L1.

#include <string>
#include <utility>
#include <vector>

#include "metasr/conv.hpp"
#include "metasr/nn.hpp"

namespace metasr {

struct KrConfig {
  int64_t c_s = 8;    // student tap width
  int64_t c_t = 32;   // teacher tap width
  int64_t c_mid = 0;  // dimension matcher middle width; 0 means c_t
  int64_t grid = 8;   // K; generated kernels have c_o = K*K output channels
  int64_t k = 3;      // generated kernel spatial size

  int64_t mid() const { return c_mid > 0 ? c_mid : c_t; }
  int64_t c_o() const { return grid * grid; }

  void validate() const {
    if (c_s < 1 || c_t < 1) throw ConfigError("kr channel counts must be >= 1");
    if (c_mid < 0) throw ConfigError("kr c_mid must be >= 0 (0 selects c_t)");
    if (grid < 1) throw ConfigError("kr grid side must be >= 1");
    if (k < 1 || k % 2 == 0) throw ConfigError("kr kernel size must be odd, got " + std::to_string(k));
  }
};

constexpr double kKrSlope = 0.2;  // LeakyReLU slope used throughout

// Shrink applied to the generator convs at init. The descriptors are built
// from two stacked dynamic convolutions, so their magnitude grows with the
// square of the generated-kernel scale; damping both generator stages keeps
// the matching loss near conv scale instead of exploding with the fan-in.
constexpr double kKrGenGain = 1e-3;

// phi: dimension matcher (two 1x1 convs) plus one reorg conv per generator.
inline ParamSet build_krnet(const KrConfig& cfg, uint64_t seed, double gen_gain = kKrGenGain) {
  cfg.validate();
  Rng rng(seed);
  ParamSet phi;
  add_conv(phi, "dm1", cfg.mid(), cfg.c_s, 1, rng);
  add_conv(phi, "dm2", cfg.c_t, cfg.mid(), 1, rng);
  add_conv(phi, "gen1", cfg.c_t, cfg.c_t, 1, rng);
  add_conv(phi, "gen2", cfg.c_o(), cfg.c_t, 1, rng);
  for (const char* name : {"gen1.w", "gen1.b", "gen2.w", "gen2.b"}) {
    Tensor t = phi.at(name).value().clone();
    for (int64_t i = 0; i < t.numel(); ++i) t.mutable_data()[i] *= gen_gain;
    phi.set(name, parameter(t));
  }
  return phi;
}

// conv1x1 -> LeakyReLU -> conv1x1, lifting c_s channels to c_t.
inline Var dimension_match(const ParamSet& phi, const KrConfig& cfg, const Var& f_s) {
  check_nchw(f_s.shape(), "dimension_match");
  if (f_s.shape()[1] != cfg.c_s)
    throw ShapeError("dimension_match wants " + std::to_string(cfg.c_s) + " channels, got " +
                     std::to_string(f_s.shape()[1]));
  Var h = apply_conv(phi, "dm1", f_s, 0);
  return apply_conv(phi, "dm2", leaky_relu(h, kKrSlope), 0);
}

// Per sample: correlation = softmax over student channels of (T * S^T), then
// each teacher-channel row becomes that convex combination of student
// channels. Output has teacher width at the original spatial size.
inline Var channel_correlation(const Var& f_s, const Var& f_t) {
  check_nchw(f_s.shape(), "channel_correlation");
  check_nchw(f_t.shape(), "channel_correlation");
  const Shape &ss = f_s.shape(), &ts = f_t.shape();
  if (ss[0] != ts[0] || ss[2] != ts[2] || ss[3] != ts[3])
    throw ShapeError("channel_correlation mismatch " + shape_str(ss) + " vs " + shape_str(ts));
  const int64_t n = ss[0], cs = ss[1], ct = ts[1], hw = ss[2] * ss[3];
  std::vector<Var> rows;
  rows.reserve(static_cast<size_t>(n));
  for (int64_t b = 0; b < n; ++b) {
    Var s2 = reshape(slice_batch(f_s, b, 1), {cs, hw});
    Var t2 = reshape(slice_batch(f_t, b, 1), {ct, hw});
    Var corr = softmax(matmul_nt(t2, s2), 1);  // (ct, cs), rows sum to 1
    rows.push_back(reshape(matmul(corr, s2), {1, ct, ss[2], ss[3]}));
  }
  return concat_batch(rows);
}

// Reorg conv, then pool each cell of a KxK spatial grid down to a kxk
// filter: subpatch (r,c) becomes output-channel filter r*K+c.
inline Var generate_texture_kernels(const ParamSet& phi, const std::string& gen,
                                    const KrConfig& cfg, const Var& f) {
  check_nchw(f.shape(), "generate_texture_kernels");
  const int64_t h = f.shape()[2], w = f.shape()[3];
  if (h % cfg.grid != 0 || w % cfg.grid != 0)
    throw ConfigError("feature " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible into a " + std::to_string(cfg.grid) + "x" +
                      std::to_string(cfg.grid) + " grid");
  Var r = apply_conv(phi, gen, f, 0);
  return patch_pool(r, cfg.grid, cfg.k);
}

// Both descriptors use the same generated kernel pair; same-padding keeps
// the spatial extent.
inline std::pair<Var, Var> extract_descriptors(const Var& f_t, const Var& f_s_matched,
                                               const Var& w1, const Var& w2) {
  if (f_t.shape() != f_s_matched.shape())
    throw ShapeError("descriptor branches disagree: " + shape_str(f_t.shape()) + " vs " +
                     shape_str(f_s_matched.shape()));
  const int64_t pad = (w1.shape()[3] - 1) / 2;
  const int64_t pad2 = (w2.shape()[3] - 1) / 2;
  auto branch = [&](const Var& f) {
    Var a = leaky_relu(conv2d_dynamic(f, w1, pad), kKrSlope);
    return conv2d_dynamic(a, w2, pad2);
  };
  return {branch(f_t), branch(f_s_matched)};
}

// One tap's descriptor distance; the full loss sums the taps.
inline Var tap_distill_loss(const ParamSet& phi, const KrConfig& cfg, const Var& f_t,
                            const Var& f_s) {
  Var mixed = channel_correlation(f_s, f_t);
  Var w1 = generate_texture_kernels(phi, "gen1", cfg, mixed);
  Var w2 = generate_texture_kernels(phi, "gen2", cfg, mixed);
  Var matched = dimension_match(phi, cfg, f_s);
  auto [k_t, k_s] = extract_descriptors(f_t, matched, w1, w2);
  return l1_loss(k_s, k_t);
}

// Distillation loss over all taps. per_tap, when given, receives each tap's
// contribution so a non-finite loss can be pinned to its tap.
inline Var distill_loss(const ParamSet& phi, const KrConfig& cfg, const std::vector<Var>& taps_t,
                        const std::vector<Var>& taps_s, std::vector<double>* per_tap = nullptr) {
  if (taps_t.size() != taps_s.size())
    throw ShapeError("tap count mismatch: " + std::to_string(taps_t.size()) + " teacher vs " +
                     std::to_string(taps_s.size()) + " student");
  if (taps_t.empty()) throw ShapeError("distill_loss needs at least one tap");
  if (per_tap) per_tap->clear();
  Var total;
  for (size_t i = 0; i < taps_t.size(); ++i) {
    Var term = tap_distill_loss(phi, cfg, taps_t[i], taps_s[i]);
    if (per_tap) per_tap->push_back(term.value().item());
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// Identity 1x1 kernel, handy for constructing pass-through dimension
// matchers and reorg convs in controlled settings.
inline Tensor identity_conv1x1(int64_t c) {
  Tensor w({c, c, 1, 1});
  for (int64_t i = 0; i < c; ++i) w.mutable_data()[i * c + i] = 1.0;
  return w;
}

inline void make_dm_identity(ParamSet& phi, const KrConfig& cfg) {
  if (cfg.c_s != cfg.c_t || cfg.mid() != cfg.c_t)
    throw ConfigError("identity dimension matcher needs c_s == c_mid == c_t");
  phi.set("dm1.w", parameter(identity_conv1x1(cfg.c_t)));
  phi.set("dm1.b", parameter(Tensor::zeros({cfg.c_t})));
  phi.set("dm2.w", parameter(identity_conv1x1(cfg.c_t)));
  phi.set("dm2.b", parameter(Tensor::zeros({cfg.c_t})));
}

}  // namespace metasr
