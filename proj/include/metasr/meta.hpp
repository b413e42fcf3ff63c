#pragma once

// Bilevel distillation engine. A meta-round unrolls T functional SGD steps on
// the kernel-matching loss, keeping the updated student parameters
// graph-connected to the generator parameters phi; the reconstruction loss
// evaluated after the unroll can then be differentiated w.r.t. phi exactly.
// The production loop interleaves these rounds with ordinary Adam steps under
// cosine-annealed learning rates.

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "metasr/data.hpp"
#include "metasr/krnet.hpp"
#include "metasr/nn.hpp"
#include "metasr/sr_model.hpp"

namespace metasr {

// How student tap features are matched against teacher taps.
enum class KrMode {
  none,          // no matching loss (vanilla training)
  conv_adapter,  // per-tap 1x1 conv lifts student features, then L1
  krnet          // texture-kernel descriptors, see krnet.hpp
};

inline KrMode kr_mode_from(const std::string& s) {
  if (s == "none") return KrMode::none;
  if (s == "conv") return KrMode::conv_adapter;
  if (s == "krnet") return KrMode::krnet;
  throw ConfigError("unknown knowledge-representation mode '" + s +
                    "' (expected none|conv|krnet)");
}

inline const char* kr_mode_name(KrMode m) {
  switch (m) {
    case KrMode::none: return "none";
    case KrMode::conv_adapter: return "conv";
    default: return "krnet";
  }
}

// Per-tap adapter parameters for KrMode::conv_adapter.
inline ParamSet build_adapter(int64_t c_s, int64_t c_t, int64_t n_taps, uint64_t seed) {
  ParamSet phi;
  Rng rng(seed);
  for (int64_t i = 0; i < n_taps; ++i)
    add_conv(phi, "adapt" + std::to_string(i), c_t, c_s, 1, rng);
  return phi;
}

// Matching loss between aligned tap lists under the given mode. per_tap, when
// given, receives each tap's contribution.
inline Var match_loss(KrMode mode, const ParamSet& phi, const KrConfig& kr,
                      const std::vector<Var>& taps_t, const std::vector<Var>& taps_s,
                      std::vector<double>* per_tap = nullptr) {
  if (mode == KrMode::krnet) return distill_loss(phi, kr, taps_t, taps_s, per_tap);
  if (mode == KrMode::none)
    throw ConfigError("matching loss requested but knowledge-representation mode is 'none'");
  if (taps_t.size() != taps_s.size())
    throw ShapeError("tap count mismatch: " + std::to_string(taps_t.size()) + " teacher vs " +
                     std::to_string(taps_s.size()) + " student");
  if (per_tap) per_tap->clear();
  Var total;
  for (size_t i = 0; i < taps_t.size(); ++i) {
    Var lifted = apply_conv(phi, "adapt" + std::to_string(i), taps_s[i], 0);
    Var term = l1_loss(lifted, taps_t[i]);
    if (per_tap) per_tap->push_back(term.value().item());
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Functional parameter vectors

inline ParamSet bind_params(const std::vector<std::string>& names, const std::vector<Var>& vals) {
  if (names.size() != vals.size()) throw ShapeError("bind_params: name/value count mismatch");
  ParamSet ps;
  for (size_t i = 0; i < names.size(); ++i) ps.add(names[i], vals[i]);
  return ps;
}

inline std::vector<std::string> param_names(const ParamSet& ps) {
  std::vector<std::string> n;
  n.reserve(ps.size());
  for (const auto& kv : ps.items()) n.push_back(kv.first);
  return n;
}

// FNV-1a over raw bytes; used to fingerprint parameter sets.
inline uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t param_checksum(const ParamSet& ps) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& kv : ps.items()) {
    h = fnv1a_bytes(kv.first.data(), kv.first.size(), h);
    const Tensor& t = kv.second.value();
    h = fnv1a_bytes(t.data(), sizeof(double) * static_cast<size_t>(t.numel()), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Inner unroll

// Maps the current student parameter vector to the inner objective.
using ThetaLoss = std::function<Var(const std::vector<Var>&)>;

// One functional SGD step: theta' = theta - alpha * dL/dtheta. No parameter
// is mutated; with second_order the gradients themselves stay recorded, so
// theta' remains differentiable w.r.t. everything upstream of the loss (the
// generator parameters in particular). Without it the gradients are constants
// and theta' only connects back to theta.
inline std::vector<Var> sgd_step(const std::vector<Var>& theta, const Var& loss, double alpha,
                                 bool second_order) {
  auto grads = backward(loss, theta, second_order);
  std::vector<Var> next;
  next.reserve(theta.size());
  for (size_t i = 0; i < theta.size(); ++i) next.push_back(sub(theta[i], scale(grads[i], alpha)));
  return next;
}

struct UnrollResult {
  std::vector<Var> theta;            // theta_T, graph-connected to theta_0 (and phi
                                     // when second_order)
  std::vector<Var> losses;           // recorded per-step losses, evaluated pre-update
  std::vector<double> loss_values;
  bool second_order = false;
};

inline UnrollResult unroll_inner(const std::vector<Var>& theta0, const ThetaLoss& loss_fn,
                                 int64_t steps, double alpha, bool second_order) {
  UnrollResult r;
  r.theta = theta0;
  r.second_order = second_order;
  for (int64_t t = 0; t < steps; ++t) {
    Var loss = loss_fn(r.theta);
    r.losses.push_back(loss);
    r.loss_values.push_back(loss.value().item());
    r.theta = sgd_step(r.theta, loss, alpha, second_order);
  }
  return r;
}

// Gradient of a post-unroll objective w.r.t. phi. Demands a second-order
// unroll: on a first-order unroll the inner gradients were detached, the
// chain to phi is already cut, and silently returning zeros here would mask
// the mistake.
inline std::vector<Var> phi_gradient(const UnrollResult& unroll, const Var& l_org,
                                     const std::vector<Var>& phi) {
  if (!unroll.second_order)
    throw NumericError(
        "meta-gradient requested from a first-order unroll; rerun the inner steps with "
        "second_order=true");
  return backward(l_org, phi);
}

// ---------------------------------------------------------------------------
// Distiller: frozen teacher + student/network wiring

struct Distiller {
  NetConfig teacher_cfg;
  NetConfig student_cfg;
  ParamSet teacher;  // constants; never updated
  KrMode mode = KrMode::krnet;
  KrConfig kr;  // used when mode == KrMode::krnet

  void validate() const {
    teacher_cfg.validate();
    student_cfg.validate();
    if (teacher_cfg.scale != student_cfg.scale)
      throw ConfigError("teacher and student must share the upscaling factor");
    if (mode != KrMode::none && teacher_cfg.n_taps != student_cfg.n_taps)
      throw ConfigError("teacher taps (" + std::to_string(teacher_cfg.n_taps) +
                        ") != student taps (" + std::to_string(student_cfg.n_taps) + ")");
    if (mode == KrMode::krnet) {
      kr.validate();
      if (kr.c_s != student_cfg.n_feats || kr.c_t != teacher_cfg.n_feats)
        throw ConfigError("kernel generator widths disagree with the networks");
    }
  }

  // Teacher taps for a batch, computed off-graph and frozen as constants.
  std::vector<Var> teacher_taps(const Tensor& lr) const {
    std::vector<Tensor> vals;
    {
      NoGradGuard ng;
      auto out = forward_with_taps(teacher, teacher_cfg, constant(lr));
      for (const auto& t : out.taps) vals.push_back(t.value());
    }
    std::vector<Var> taps;
    taps.reserve(vals.size());
    for (auto& v : vals) taps.push_back(constant(std::move(v)));
    return taps;
  }

  // Inner objective closure for one batch: student taps against frozen
  // teacher taps under the matching mode. A non-finite loss aborts, naming
  // the first offending tap.
  ThetaLoss inner_loss(std::vector<std::string> names, const ParamSet* phi,
                       const Batch& batch) const {
    auto taps_t = teacher_taps(batch.lr);
    return [this, names = std::move(names), phi, taps_t,
            lr = batch.lr](const std::vector<Var>& theta) {
      auto sout = forward_with_taps(bind_params(names, theta), student_cfg, constant(lr));
      std::vector<double> per_tap;
      Var l = match_loss(mode, *phi, kr, taps_t, sout.taps, &per_tap);
      if (!std::isfinite(l.value().item())) {
        for (size_t i = 0; i < per_tap.size(); ++i)
          if (!std::isfinite(per_tap[i]))
            throw NumericError("inner step: non-finite matching loss at tap " +
                               std::to_string(i) + " (value " + std::to_string(per_tap[i]) +
                               ")");
        throw NumericError("inner step: non-finite matching loss (all taps finite, sum is not)");
      }
      return l;
    };
  }

  // Reconstruction objective (mean absolute error against the ground truth).
  Var recon_loss(const ParamSet& student, const Batch& batch) const {
    Var sr = forward(student, student_cfg, constant(batch.lr));
    return l1_loss(sr, constant(batch.hr));
  }

  Var recon_loss(const std::vector<std::string>& names, const std::vector<Var>& theta,
                 const Batch& batch) const {
    return recon_loss(bind_params(names, theta), batch);
  }
};

// ---------------------------------------------------------------------------
// Meta-gradient

struct MetaRound {
  std::vector<Tensor> grad_phi;      // aligned with phi.items() order
  std::vector<Tensor> theta_after;   // unrolled parameter values, aligned with theta
  std::vector<double> inner_losses;  // matching loss per inner step
  double l_org = 0.0;                // reconstruction loss at theta_T on the meta batch
  bool grad_finite = true;
};

// Pure: reads theta and phi, mutates neither. first_order is the documented
// cheap fallback — it detaches the inner gradients, which severs every path
// from the meta objective back to phi, so grad_phi comes back exactly zero;
// useful only to bound the cost of the full meta-gradient.
inline MetaRound meta_gradient(const Distiller& d, const ParamSet& theta, const ParamSet& phi,
                               const Batch& inner, const Batch& meta_batch, int64_t steps,
                               double alpha, bool first_order = false) {
  auto names = param_names(theta);
  auto loss_fn = d.inner_loss(names, &phi, inner);
  auto unroll = unroll_inner(theta.vars(), loss_fn, steps, alpha, !first_order);
  Var l_org = d.recon_loss(names, unroll.theta, meta_batch);

  MetaRound out;
  out.inner_losses = unroll.loss_values;
  out.l_org = l_org.value().item();
  for (const auto& v : unroll.theta) out.theta_after.push_back(v.value());
  std::vector<Var> g = first_order ? backward(l_org, phi.vars())
                                   : phi_gradient(unroll, l_org, phi.vars());
  out.grad_phi = grad_values(g);
  out.grad_finite = grads_all_finite(g);
  return out;
}

// ---------------------------------------------------------------------------
// Production loop

struct TrainPlan {
  KrMode mode = KrMode::krnet;
  bool meta = true;          // phi chases the post-unroll reconstruction loss;
                             // otherwise phi descends the matching loss directly
  bool first_order = false;  // zero-gradient fallback for the meta update
  int64_t rounds = 100;
  int64_t inner_steps = 1;   // T: unrolled SGD steps per round
  int64_t train_steps = 1;   // M: Adam steps on the joint objective per round
  double alpha = 1e-4;       // inner SGD rate
  double lambda = 1.0;       // weight of the matching loss in the joint objective
  double phi_lr = 1e-4;
  double lr0 = 1e-4;
  double lr_min = 5e-6;
  int64_t total_steps = 0;   // cosine horizon; 0 means rounds * train_steps
  int64_t val_every = 0;     // rounds between validation passes (0 = off)
  int64_t ckpt_every = 0;    // rounds between checkpoint callbacks (0 = off)
  double divergence_factor = 1e3;

  bool uses_kd() const { return mode != KrMode::none; }

  void validate() const {
    if (rounds < 0 || inner_steps < 0 || train_steps < 0)
      throw ConfigError("round and step counts must be non-negative");
    if (alpha < 0) throw ConfigError("inner learning rate must be >= 0");
    if (lambda < 0) throw ConfigError("matching-loss weight must be >= 0");
    if (uses_kd() && inner_steps == 0 && lambda == 0.0 && meta)
      throw ConfigError("meta updates need inner steps or a positive matching weight");
  }
};

struct RoundStats {
  int64_t round = 0;
  double l_kd = std::numeric_limits<double>::quiet_NaN();    // matching loss at round start
  double l_org = std::numeric_limits<double>::quiet_NaN();   // mean over the round's Adam steps
  double l_meta = std::numeric_limits<double>::quiet_NaN();  // post-unroll validation loss
  double lr = 0.0;
  double val_psnr = std::numeric_limits<double>::quiet_NaN();
  bool phi_skipped = false;  // non-finite phi gradient, update dropped
};

struct TrainCallbacks {
  std::function<double(const ParamSet&)> validate;           // student -> val PSNR
  std::function<void(const std::string&)> log_line;          // one JSON record per round
  std::function<void(const ParamSet&, const ParamSet&, const std::string&)> checkpoint;
};

namespace detail {

inline std::string json_num(double v) {
  if (std::isnan(v)) return "null";
  if (std::isinf(v)) return v > 0 ? "\"inf\"" : "\"-inf\"";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string round_record(const RoundStats& s) {
  std::string line = "{\"round\":" + std::to_string(s.round);
  line += ",\"l_kd\":" + json_num(s.l_kd);
  line += ",\"l_org\":" + json_num(s.l_org);
  line += ",\"l_meta\":" + json_num(s.l_meta);
  line += ",\"lr\":" + json_num(s.lr);
  line += ",\"val_psnr\":" + json_num(s.val_psnr);
  line += s.phi_skipped ? ",\"phi\":\"skipped\"}" : ",\"phi\":\"ok\"}";
  return line;
}

}  // namespace detail

// Runs the full schedule. Per round: (a) unroll inner_steps SGD steps on the
// matching loss, (b) update phi — through the meta-gradient of the post-unroll
// reconstruction loss on a fresh batch, or directly on the matching loss when
// meta is off, (c) commit the unrolled student parameters, (d) train_steps
// Adam steps on reconstruction + lambda * matching under the cosine schedule.
// With mode none and inner_steps == 0 this reduces to vanilla training.
inline std::vector<RoundStats> train_loop(const Distiller& d, ParamSet& theta, ParamSet& phi,
                                          BatchSampler& sampler, const TrainPlan& plan,
                                          const TrainCallbacks& cb = {}) {
  plan.validate();
  d.validate();
  const auto names = param_names(theta);
  const int64_t horizon =
      plan.total_steps > 0 ? plan.total_steps : plan.rounds * std::max<int64_t>(1, plan.train_steps);
  Adam theta_opt(plan.lr0);
  Adam phi_opt(plan.phi_lr);
  std::vector<RoundStats> history;
  double initial_loss = std::numeric_limits<double>::quiet_NaN();
  int64_t global_step = 0;

  for (int64_t round = 0; round < plan.rounds; ++round) {
    RoundStats stats;
    stats.round = round;

    if (plan.uses_kd()) {
      const Batch inner = sampler.next();
      auto loss_fn = d.inner_loss(names, &phi, inner);
      auto unroll = unroll_inner(theta.vars(), loss_fn, plan.inner_steps, plan.alpha,
                                 plan.meta && !plan.first_order);
      if (!unroll.loss_values.empty()) stats.l_kd = unroll.loss_values.front();

      if (plan.meta) {
        // (b) phi chases the reconstruction loss of the unrolled student
        const Batch meta_batch = sampler.next();
        Var l_meta = d.recon_loss(names, unroll.theta, meta_batch);
        stats.l_meta = l_meta.value().item();
        std::vector<Var> g = plan.first_order ? backward(l_meta, phi.vars())
                                              : phi_gradient(unroll, l_meta, phi.vars());
        if (grads_all_finite(g)) {
          phi_opt.step(phi, grad_values(g));
        } else {
          stats.phi_skipped = true;
        }
      } else {
        // (b') no meta objective: phi descends the matching loss itself
        Var l_kd0 = unroll.losses.empty() ? loss_fn(theta.vars()) : unroll.losses.front();
        if (std::isnan(stats.l_kd)) stats.l_kd = l_kd0.value().item();
        std::vector<Var> g = backward(l_kd0, phi.vars());
        if (grads_all_finite(g)) {
          phi_opt.step(phi, grad_values(g));
        } else {
          stats.phi_skipped = true;
        }
      }

      // (c) commit theta_T as fresh leaves
      for (size_t i = 0; i < names.size(); ++i)
        theta.set(names[i], parameter(unroll.theta[i].value()));
    }

    // (d) joint-objective Adam steps under the cosine schedule
    double l_org_sum = 0.0;
    int64_t l_org_count = 0;
    for (int64_t m = 0; m < plan.train_steps; ++m) {
      const Batch b = sampler.next();
      stats.lr = cosine_lr(global_step, horizon, plan.lr0, plan.lr_min);
      theta_opt.set_lr(stats.lr);
      auto sout = forward_with_taps(bind_params(names, theta.vars()), d.student_cfg,
                                    constant(b.lr));
      Var l_org = l1_loss(sout.sr, constant(b.hr));
      Var total = l_org;
      if (plan.uses_kd() && plan.lambda > 0.0) {
        auto taps_t = d.teacher_taps(b.lr);
        Var l_kd = match_loss(plan.mode, phi, d.kr, taps_t, sout.taps);
        total = add(total, scale(l_kd, plan.lambda));
      }
      l_org_sum += l_org.value().item();
      ++l_org_count;
      auto g = backward(total, theta.vars());
      if (grads_all_finite(g)) theta_opt.step(theta, grad_values(g));
      ++global_step;
    }
    if (l_org_count > 0) stats.l_org = l_org_sum / static_cast<double>(l_org_count);

    // divergence guard on the reconstruction loss
    if (l_org_count > 0) {
      if (std::isnan(initial_loss)) initial_loss = std::max(stats.l_org, 1e-12);
      if (!std::isfinite(stats.l_org) || stats.l_org > plan.divergence_factor * initial_loss) {
        if (cb.checkpoint) cb.checkpoint(theta, phi, "diverged");
        throw NumericError("training diverged at round " + std::to_string(round) +
                           ": reconstruction loss " + std::to_string(stats.l_org) +
                           " exceeds " + std::to_string(plan.divergence_factor) +
                           "x the initial " + std::to_string(initial_loss));
      }
    }

    if (plan.val_every > 0 && cb.validate && (round + 1) % plan.val_every == 0)
      stats.val_psnr = cb.validate(theta);
    if (plan.ckpt_every > 0 && cb.checkpoint && (round + 1) % plan.ckpt_every == 0)
      cb.checkpoint(theta, phi, "round" + std::to_string(round + 1));
    if (cb.log_line) cb.log_line(detail::round_record(stats));
    history.push_back(stats);
  }
  return history;
}

}  // namespace metasr
