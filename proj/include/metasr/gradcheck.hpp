#pragma once

// Finite-difference verification of the autodiff engine. First order compares
// backward() against central differences of the forward evaluation; second
// order compares Hessian-vector products (double backward) against central
// differences of the first-order gradient.

#include <functional>
#include <vector>

#include "metasr/autograd.hpp"

namespace metasr {

// Builds a scalar loss graph from one Var per input tensor.
using GraphFn = std::function<Var(const std::vector<Var>&)>;

struct GradReport {
  std::vector<double> per_input;
  double worst = 0.0;
};

// max_i |a_i - f_i| / max(1, |a|_inf, |f|_inf)
inline double rel_err(const Tensor& a, const Tensor& f) {
  if (!a.same_shape(f)) throw ShapeError("rel_err shape mismatch");
  double num = 0.0;
  const double* pa = a.data();
  const double* pf = f.data();
  for (int64_t i = 0; i < a.numel(); ++i) num = std::max(num, std::abs(pa[i] - pf[i]));
  const double den = std::max(1.0, std::max(a.abs_max(), f.abs_max()));
  return num / den;
}

namespace detail {

inline double eval_scalar(const GraphFn& f, const std::vector<Tensor>& ts) {
  NoGradGuard ng;
  std::vector<Var> vs;
  vs.reserve(ts.size());
  for (const auto& t : ts) vs.push_back(constant(t));
  Var loss = f(vs);
  if (loss.value().numel() != 1) throw ShapeError("gradcheck loss must be scalar");
  return loss.value().data()[0];
}

inline std::vector<Tensor> eval_gradients(const GraphFn& f, const std::vector<Tensor>& ts,
                                          bool create_graph, std::vector<Var>* grads_out) {
  std::vector<Var> ps;
  ps.reserve(ts.size());
  for (const auto& t : ts) ps.push_back(parameter(t));
  Var loss = f(ps);
  auto gs = backward(loss, ps, create_graph);
  std::vector<Tensor> vals;
  vals.reserve(gs.size());
  for (const auto& g : gs) vals.push_back(g.value());
  if (grads_out) *grads_out = gs;
  return vals;
}

}  // namespace detail

// Central-difference gradient of f with respect to input j.
inline Tensor fd_gradient(const GraphFn& f, const std::vector<Tensor>& inputs, size_t j,
                          double h = 1e-6) {
  Tensor g(inputs[j].shape());
  double* go = g.mutable_data();
  std::vector<Tensor> ts = inputs;
  Tensor probe = inputs[j].clone();
  ts[j] = probe;
  double* p = probe.mutable_data();
  for (int64_t i = 0; i < probe.numel(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = detail::eval_scalar(f, ts);
    p[i] = keep - h;
    const double dn = detail::eval_scalar(f, ts);
    p[i] = keep;
    go[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

inline GradReport check_gradients(const GraphFn& f, const std::vector<Tensor>& inputs,
                                  double h = 1e-6) {
  std::vector<Tensor> analytic = detail::eval_gradients(f, inputs, false, nullptr);
  GradReport rep;
  for (size_t j = 0; j < inputs.size(); ++j) {
    const double e = rel_err(analytic[j], fd_gradient(f, inputs, j, h));
    rep.per_input.push_back(e);
    rep.worst = std::max(rep.worst, e);
  }
  return rep;
}

// Hessian-vector product in direction v: differentiate sum_j <grad_j, v_j>.
inline std::vector<Tensor> hvp(const GraphFn& f, const std::vector<Tensor>& inputs,
                               const std::vector<Tensor>& v) {
  std::vector<Var> ps;
  ps.reserve(inputs.size());
  for (const auto& t : inputs) ps.push_back(parameter(t));
  Var loss = f(ps);
  auto gs = backward(loss, ps, /*create_graph=*/true);
  Var dot;
  for (size_t j = 0; j < gs.size(); ++j) {
    Var term = sum_all(mul(gs[j], constant(v[j])));
    dot = dot.defined() ? add(dot, term) : term;
  }
  auto hs = backward(dot, ps);
  std::vector<Tensor> vals;
  vals.reserve(hs.size());
  for (const auto& g2 : hs) vals.push_back(g2.value());
  return vals;
}

// Central difference of the analytic gradient along v.
inline std::vector<Tensor> fd_hvp(const GraphFn& f, const std::vector<Tensor>& inputs,
                                  const std::vector<Tensor>& v, double h = 1e-5) {
  auto shifted = [&](double sign) {
    std::vector<Tensor> ts;
    ts.reserve(inputs.size());
    for (size_t j = 0; j < inputs.size(); ++j) {
      Tensor t = inputs[j].clone();
      double* p = t.mutable_data();
      const double* d = v[j].data();
      for (int64_t i = 0; i < t.numel(); ++i) p[i] += sign * h * d[i];
      ts.push_back(t);
    }
    return detail::eval_gradients(f, ts, false, nullptr);
  };
  auto up = shifted(1.0);
  auto dn = shifted(-1.0);
  std::vector<Tensor> out;
  out.reserve(up.size());
  for (size_t j = 0; j < up.size(); ++j) {
    Tensor g(up[j].shape());
    double* o = g.mutable_data();
    const double* a = up[j].data();
    const double* b = dn[j].data();
    for (int64_t i = 0; i < g.numel(); ++i) o[i] = (a[i] - b[i]) / (2.0 * h);
    out.push_back(g);
  }
  return out;
}

inline GradReport check_hvp(const GraphFn& f, const std::vector<Tensor>& inputs, Rng& rng,
                            double h = 1e-5) {
  std::vector<Tensor> v;
  v.reserve(inputs.size());
  for (const auto& t : inputs) v.push_back(Tensor::normal(t.shape(), rng));
  auto analytic = hvp(f, inputs, v);
  auto numeric = fd_hvp(f, inputs, v, h);
  GradReport rep;
  for (size_t j = 0; j < inputs.size(); ++j) {
    const double e = rel_err(analytic[j], numeric[j]);
    rep.per_input.push_back(e);
    rep.worst = std::max(rep.worst, e);
  }
  return rep;
}

}  // namespace metasr
