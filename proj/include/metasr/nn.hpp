#pragma once

// Named parameter collections and training utilities. Parameters live in a
// ParamSet rather than inside layer objects so that an update can produce a
// fresh set of Vars: recorded updates (sub/scale on the graph) give
// differentiable unrolls, detached updates give ordinary training steps.

#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "metasr/autograd.hpp"

namespace metasr {

class ParamSet {
 public:
  void add(std::string name, Var v) {
    if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
    index_[name] = items_.size();
    items_.emplace_back(std::move(name), std::move(v));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Var& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return items_[it->second].second;
  }

  void set(const std::string& name, Var v) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    if (v.shape() != items_[it->second].second.shape())
      throw ShapeError("parameter " + name + " shape changed");
    items_[it->second].second = std::move(v);
  }

  size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }

  std::vector<Var> vars() const {
    std::vector<Var> v;
    v.reserve(items_.size());
    for (const auto& kv : items_) v.push_back(kv.second);
    return v;
  }

  // Fresh trainable leaves over the same buffers; cuts any recorded history.
  ParamSet as_leaves() const {
    ParamSet ps;
    for (const auto& kv : items_) ps.add(kv.first, parameter(kv.second.value()));
    return ps;
  }

  // Frozen view: constants, gradients never flow in.
  ParamSet as_constants() const {
    ParamSet ps;
    for (const auto& kv : items_) ps.add(kv.first, constant(kv.second.value()));
    return ps;
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& kv : items_) n += kv.second.value().numel();
    return n;
  }

  ParamList named_values() const {
    ParamList out;
    out.reserve(items_.size());
    for (const auto& kv : items_) out.emplace_back(kv.first, kv.second.value());
    return out;
  }

  static ParamSet from_list(const ParamList& list, bool trainable) {
    ParamSet ps;
    for (const auto& kv : list)
      ps.add(kv.first, trainable ? parameter(kv.second) : constant(kv.second));
    return ps;
  }

  // Order-insensitive load: every existing entry replaced by the same-named
  // tensor from the list.
  void load_values(const ParamList& list, bool trainable) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& kv : list) by_name[kv.first] = &kv.second;
    for (const auto& kv : items_) {
      auto it = by_name.find(kv.first);
      if (it == by_name.end()) throw IoError("missing parameter in checkpoint: " + kv.first);
      set(kv.first, trainable ? parameter(*it->second) : constant(*it->second));
    }
  }

 private:
  std::vector<std::pair<std::string, Var>> items_;
  std::map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Initialization (uniform Kaiming, fan-in)

inline Tensor kaiming_conv_weight(int64_t co, int64_t ci, int64_t k, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(ci * k * k));
  return Tensor::uniform({co, ci, k, k}, rng, -bound, bound);
}

inline Tensor conv_bias_init(int64_t co, int64_t ci, int64_t k, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
  return Tensor::uniform({co}, rng, -bound, bound);
}

inline void add_conv(ParamSet& ps, const std::string& name, int64_t co, int64_t ci, int64_t k,
                     Rng& rng) {
  ps.add(name + ".w", parameter(kaiming_conv_weight(co, ci, k, rng)));
  ps.add(name + ".b", parameter(conv_bias_init(co, ci, k, rng)));
}

inline Var conv2d(const Var& x, const Var& w, const Var& bias, int64_t pad);  // conv.hpp

inline Var apply_conv(const ParamSet& ps, const std::string& name, const Var& x, int64_t pad) {
  return conv2d(x, ps.at(name + ".w"), ps.at(name + ".b"), pad);
}

// ---------------------------------------------------------------------------
// Cost accounting

inline int64_t conv_param_count(int64_t ci, int64_t co, int64_t k, bool bias = true) {
  return co * ci * k * k + (bias ? co : 0);
}

// Multiply-accumulate pairs for one conv applied at output size h x w.
inline double conv_flops(int64_t k, int64_t ci, int64_t co, int64_t h, int64_t w) {
  return 2.0 * static_cast<double>(k * k) * static_cast<double>(ci) *
         static_cast<double>(co) * static_cast<double>(h) * static_cast<double>(w);
}

// ---------------------------------------------------------------------------
// Optimization

// Endpoints are returned exactly; in between, convex blend with a half-cosine
// weight.
inline double cosine_lr(int64_t step, int64_t total, double lr0, double lr_min) {
  if (total <= 0 || step <= 0) return lr0;
  if (step >= total) return lr_min;
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                         static_cast<double>(total)));
  return lr0 * w + lr_min * (1.0 - w);
}

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t steps_taken() const { return t_; }

  // grads must align with ps.items() order. Leaves in ps are replaced by new
  // leaves holding the updated values.
  void step(ParamSet& ps, const std::vector<Tensor>& grads) {
    if (grads.size() != ps.size()) throw ShapeError("adam: gradient count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t i = 0; i < grads.size(); ++i) {
      const auto& name = ps.items()[i].first;
      const Tensor& g = grads[i];
      const Tensor& theta = ps.items()[i].second.value();
      if (!g.same_shape(theta)) throw ShapeError("adam: gradient shape mismatch for " + name);
      if (!g.all_finite()) throw NumericError("adam: non-finite gradient for " + name);
      auto& slot = state_[name];
      if (slot.m.numel() != theta.numel()) {
        slot.m = Tensor::zeros(theta.shape());
        slot.v = Tensor::zeros(theta.shape());
      }
      Tensor out(theta.shape());
      double* o = out.mutable_data();
      double* m = slot.m.mutable_data();
      double* v = slot.v.mutable_data();
      const double* gp = g.data();
      const double* tp = theta.data();
      for (int64_t j = 0; j < theta.numel(); ++j) {
        m[j] = b1_ * m[j] + (1.0 - b1_) * gp[j];
        v[j] = b2_ * v[j] + (1.0 - b2_) * gp[j] * gp[j];
        const double mh = m[j] / c1;
        const double vh = v[j] / c2;
        o[j] = tp[j] - lr_ * mh / (std::sqrt(vh) + eps_);
      }
      ps.set(name, parameter(out));
    }
  }

 private:
  struct Slot {
    Tensor m, v;
  };
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, Slot> state_;
};

inline bool grads_all_finite(const std::vector<Var>& gs) {
  for (const auto& g : gs)
    if (!g.value().all_finite()) return false;
  return true;
}

inline std::vector<Tensor> grad_values(const std::vector<Var>& gs) {
  std::vector<Tensor> ts;
  ts.reserve(gs.size());
  for (const auto& g : gs) ts.push_back(g.value());
  return ts;
}

}  // namespace metasr
