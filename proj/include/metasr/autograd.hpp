#pragma once

// Reverse-mode autodiff over Tensors, closed under differentiation: every
// adjoint rule is expressed in terms of the recorded ops themselves, so a
// gradient produced with create_graph=true is an ordinary graph value and can
// be differentiated again. This is what makes unrolled inner-loop training
// differentiable with respect to the parameters that shaped the inner loss.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "metasr/tensor.hpp"

namespace metasr {

class Var;
struct Node;
using NodePtr = std::shared_ptr<Node>;
// Adjoint rule: given the node and the adjoint of its output, emit adjoints
// for each input, built from recorded ops.
using VjpFn = std::function<std::vector<Var>(const NodePtr& self, const Var& grad_out)>;

struct Node : std::enable_shared_from_this<Node> {
  Tensor value;
  const char* op = "leaf";
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  VjpFn vjp;

  // Iterative teardown: long op chains (unrolled training steps) would
  // otherwise blow the stack through recursive shared_ptr destruction.
  ~Node() {
    std::vector<NodePtr> stack;
    stack.swap(inputs);
    while (!stack.empty()) {
      NodePtr n = std::move(stack.back());
      stack.pop_back();
      if (n && n.use_count() == 1) {
        for (auto& c : n->inputs) stack.push_back(std::move(c));
        n->inputs.clear();
      }
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : n_(std::move(n)) {}

  bool defined() const { return n_ != nullptr; }
  const Tensor& value() const { return n_->value; }
  const Shape& shape() const { return n_->value.shape(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  Node* node() const { return n_.get(); }
  const NodePtr& ptr() const { return n_; }
  const char* op() const { return n_->op; }

 private:
  NodePtr n_;
};

// ---------------------------------------------------------------------------
// Grad mode

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_mode_flag(); }

class GradModeGuard {
 public:
  explicit GradModeGuard(bool on) : prev_(grad_mode_flag()) { grad_mode_flag() = on; }
  ~GradModeGuard() { grad_mode_flag() = prev_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool prev_;
};

struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

// ---------------------------------------------------------------------------
// Node construction

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return Var(std::move(n));
}

inline Var parameter(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return Var(std::move(n));
}

// New leaf sharing the same buffer, cut off from the graph.
inline Var detach(const Var& v) { return constant(v.value()); }

inline Var make_op(const char* op, Tensor value, std::vector<NodePtr> inputs, VjpFn vjp) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  if (grad_enabled()) {
    for (const auto& i : inputs)
      if (i->requires_grad) {
        n->requires_grad = true;
        break;
      }
  }
  if (n->requires_grad) {
    n->inputs = std::move(inputs);
    n->vjp = std::move(vjp);
  }
  return Var(std::move(n));
}

// ---------------------------------------------------------------------------
// Broadcasting (numpy trailing rule, restricted to matching-or-1 extents)

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < ra ? a[ra - 1 - i] : 1;
    const int64_t db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// Strides for reading `src_shape` as if broadcast to `out_shape` (0-stride on
// broadcast dims, aligned at the trailing end).
inline Shape broadcast_strides(const Shape& src_shape, const Shape& out_shape) {
  const Shape src_st = row_major_strides(src_shape);
  Shape st(out_shape.size(), 0);
  const size_t rs = src_shape.size(), ro = out_shape.size();
  for (size_t i = 0; i < rs; ++i) {
    const size_t oi = ro - 1 - i, si = rs - 1 - i;
    st[oi] = src_shape[si] == 1 ? 0 : src_st[si];
  }
  return st;
}

template <class F>
inline Tensor binary_broadcast(const Tensor& a, const Tensor& b, F f) {
  if (a.same_shape(b)) {  // fast path
    Tensor out(a.shape());
    double* o = out.mutable_data();
    const double *pa = a.data(), *pb = b.data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) o[i] = f(pa[i], pb[i]);
    return out;
  }
  const Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out(os);
  const Shape sa = broadcast_strides(a.shape(), os);
  const Shape sb = broadcast_strides(b.shape(), os);
  const size_t r = os.size();
  std::vector<int64_t> idx(r, 0);
  double* o = out.mutable_data();
  const double *pa = a.data(), *pb = b.data();
  int64_t oa = 0, ob = 0;
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    o[i] = f(pa[oa], pb[ob]);
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      const size_t ud = static_cast<size_t>(d);
      oa += sa[ud];
      ob += sb[ud];
      if (++idx[ud] < os[ud]) break;
      oa -= sa[ud] * os[ud];
      ob -= sb[ud] * os[ud];
      idx[ud] = 0;
    }
  }
  return out;
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using CEMap = Eigen::Map<const EMat>;

inline CEMap as_matrix(const Tensor& t, int64_t rows, int64_t cols) {
  return CEMap(t.data(), rows, cols);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

inline Var add(const Var& a, const Var& b);
inline Var sub(const Var& a, const Var& b);
inline Var mul(const Var& a, const Var& b);
inline Var div(const Var& a, const Var& b);
inline Var affine(const Var& a, double k, double c);
inline Var reduce_sum(const Var& a, std::vector<int> axes, bool keepdims = false);
inline Var broadcast_to(const Var& a, Shape shape);
inline Var reshape(const Var& a, Shape shape);

inline Var scale(const Var& a, double k) { return affine(a, k, 0.0); }
inline Var neg(const Var& a) { return affine(a, -1.0, 0.0); }

// Reduce `g` back down to `target` after a broadcast.
inline Var sum_to(const Var& g, const Shape& target) {
  if (g.shape() == target) return g;
  const Shape& gs = g.shape();
  const size_t rg = gs.size(), rt = target.size();
  std::vector<int> axes;
  for (size_t i = 0; i < rg; ++i) {
    const bool leading = i < rg - rt;
    const int64_t td = leading ? 1 : target[i - (rg - rt)];
    if (td == 1 && gs[i] != 1) axes.push_back(static_cast<int>(i));
    else if (!leading && td != gs[i])
      throw ShapeError("sum_to mismatch " + shape_str(gs) + " -> " + shape_str(target));
    if (leading && gs[i] == 1) axes.push_back(static_cast<int>(i));
  }
  Var r = axes.empty() ? g : reduce_sum(g, axes, /*keepdims=*/true);
  return reshape(r, target);
}

inline Var add(const Var& a, const Var& b) {
  Tensor v = detail::binary_broadcast(a.value(), b.value(), [](double x, double y) { return x + y; });
  const Shape as = a.shape(), bs = b.shape();
  return make_op("add", std::move(v), {a.ptr(), b.ptr()},
                 [as, bs](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {sum_to(g, as), sum_to(g, bs)};
                 });
}

inline Var sub(const Var& a, const Var& b) {
  Tensor v = detail::binary_broadcast(a.value(), b.value(), [](double x, double y) { return x - y; });
  const Shape as = a.shape(), bs = b.shape();
  return make_op("sub", std::move(v), {a.ptr(), b.ptr()},
                 [as, bs](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {sum_to(g, as), sum_to(neg(g), bs)};
                 });
}

inline Var mul(const Var& a, const Var& b) {
  Tensor v = detail::binary_broadcast(a.value(), b.value(), [](double x, double y) { return x * y; });
  const Shape as = a.shape(), bs = b.shape();
  return make_op("mul", std::move(v), {a.ptr(), b.ptr()},
                 [as, bs](const NodePtr& self, const Var& g) -> std::vector<Var> {
                   Var a_in(self->inputs[0]), b_in(self->inputs[1]);
                   return {sum_to(mul(g, b_in), as), sum_to(mul(g, a_in), bs)};
                 });
}

inline Var div(const Var& a, const Var& b) {
  Tensor v = detail::binary_broadcast(a.value(), b.value(), [](double x, double y) { return x / y; });
  const Shape as = a.shape(), bs = b.shape();
  return make_op("div", std::move(v), {a.ptr(), b.ptr()},
                 [as, bs](const NodePtr& self, const Var& g) -> std::vector<Var> {
                   Var b_in(self->inputs[1]);
                   Var out(self->shared_from_this());
                   Var da = sum_to(div(g, b_in), as);
                   Var db = sum_to(neg(div(mul(g, out), b_in)), bs);
                   return {da, db};
                 });
}

inline Var affine(const Var& a, double k, double c) {
  Tensor v(a.shape());
  const double* p = a.value().data();
  double* o = v.mutable_data();
  const int64_t n = v.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = k * p[i] + c;
  return make_op("affine", std::move(v), {a.ptr()},
                 [k](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {affine(g, k, 0.0)};
                 });
}

inline Var abs(const Var& a) {
  Tensor v(a.shape());
  Tensor sign(a.shape());
  const double* p = a.value().data();
  double* o = v.mutable_data();
  double* s = sign.mutable_data();
  const int64_t n = v.numel();
  for (int64_t i = 0; i < n; ++i) {
    o[i] = std::abs(p[i]);
    // subgradient at 0 is 0
    s[i] = p[i] > 0.0 ? 1.0 : (p[i] < 0.0 ? -1.0 : 0.0);
  }
  return make_op("abs", std::move(v), {a.ptr()},
                 [sign](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {mul(g, constant(sign))};
                 });
}

inline Var exp(const Var& a) {
  Tensor v(a.shape());
  const double* p = a.value().data();
  double* o = v.mutable_data();
  const int64_t n = v.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = std::exp(p[i]);
  return make_op("exp", std::move(v), {a.ptr()},
                 [](const NodePtr& self, const Var& g) -> std::vector<Var> {
                   return {mul(g, Var(self->shared_from_this()))};
                 });
}

inline Var leaky_relu(const Var& a, double slope = 0.2) {
  Tensor v(a.shape());
  Tensor mask(a.shape());
  const double* p = a.value().data();
  double* o = v.mutable_data();
  double* m = mask.mutable_data();
  const int64_t n = v.numel();
  for (int64_t i = 0; i < n; ++i) {
    const bool pos = p[i] > 0.0;
    o[i] = pos ? p[i] : slope * p[i];
    m[i] = pos ? 1.0 : slope;
  }
  return make_op("leaky_relu", std::move(v), {a.ptr()},
                 [mask](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {mul(g, constant(mask))};
                 });
}

inline Var relu(const Var& a) { return leaky_relu(a, 0.0); }

inline Var sigmoid(const Var& a) {
  Tensor v(a.shape());
  const double* p = a.value().data();
  double* o = v.mutable_data();
  const int64_t n = v.numel();
  for (int64_t i = 0; i < n; ++i)
    o[i] = p[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-p[i]))
                       : std::exp(p[i]) / (1.0 + std::exp(p[i]));
  return make_op("sigmoid", std::move(v), {a.ptr()},
                 [](const NodePtr& self, const Var& g) -> std::vector<Var> {
                   Var out(self->shared_from_this());
                   return {mul(g, mul(out, affine(out, -1.0, 1.0)))};
                 });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Var reshape(const Var& a, Shape shape) {
  Tensor v = a.value().reshaped(shape);  // shares the buffer
  const Shape as = a.shape();
  return make_op("reshape", std::move(v), {a.ptr()},
                 [as](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {reshape(g, as)};
                 });
}

inline Var permute(const Var& a, std::vector<int> axes) {
  const Shape& is = a.shape();
  const size_t r = is.size();
  if (axes.size() != r) throw ShapeError("permute axes rank mismatch for " + shape_str(is));
  Shape os(r);
  for (size_t i = 0; i < r; ++i) os[i] = is[static_cast<size_t>(axes[i])];
  Tensor v(os);
  const Shape ist = row_major_strides(is);
  // stride of output dim i in the input buffer
  Shape step(r);
  for (size_t i = 0; i < r; ++i) step[i] = ist[static_cast<size_t>(axes[i])];
  const double* p = a.value().data();
  double* o = v.mutable_data();
  std::vector<int64_t> idx(r, 0);
  int64_t src = 0;
  const int64_t n = v.numel();
  for (int64_t i = 0; i < n; ++i) {
    o[i] = p[src];
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      const size_t ud = static_cast<size_t>(d);
      src += step[ud];
      if (++idx[ud] < os[ud]) break;
      src -= step[ud] * os[ud];
      idx[ud] = 0;
    }
  }
  std::vector<int> inv(r);
  for (size_t i = 0; i < r; ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
  return make_op("permute", std::move(v), {a.ptr()},
                 [inv](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {permute(g, inv)};
                 });
}

inline Var broadcast_to(const Var& a, Shape shape) {
  if (a.shape() == shape) return a;
  (void)broadcast_shape(a.shape(), shape);  // validates compatibility
  Tensor v(shape);
  const Shape st = detail::broadcast_strides(a.shape(), shape);
  const size_t r = shape.size();
  const double* p = a.value().data();
  double* o = v.mutable_data();
  std::vector<int64_t> idx(r, 0);
  int64_t src = 0;
  const int64_t n = v.numel();
  for (int64_t i = 0; i < n; ++i) {
    o[i] = p[src];
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      const size_t ud = static_cast<size_t>(d);
      src += st[ud];
      if (++idx[ud] < shape[ud]) break;
      src -= st[ud] * shape[ud];
      idx[ud] = 0;
    }
  }
  const Shape as = a.shape();
  return make_op("broadcast_to", std::move(v), {a.ptr()},
                 [as](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {sum_to(g, as)};
                 });
}

inline Var reduce_sum(const Var& a, std::vector<int> axes, bool keepdims) {
  const Shape& is = a.shape();
  const size_t r = is.size();
  std::vector<bool> red(r, false);
  for (int ax : axes) {
    if (ax < 0 || static_cast<size_t>(ax) >= r)
      throw ShapeError("reduce axis out of range for " + shape_str(is));
    red[static_cast<size_t>(ax)] = true;
  }
  Shape keep(r);
  for (size_t i = 0; i < r; ++i) keep[i] = red[i] ? 1 : is[i];
  Tensor v(keep);
  const Shape ost = detail::broadcast_strides(keep, is);  // 0 on reduced dims
  const double* p = a.value().data();
  double* o = v.mutable_data();
  std::vector<int64_t> idx(r, 0);
  int64_t dst = 0;
  const int64_t n = a.value().numel();
  for (int64_t i = 0; i < n; ++i) {
    o[dst] += p[i];
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      const size_t ud = static_cast<size_t>(d);
      dst += ost[ud];
      if (++idx[ud] < is[ud]) break;
      dst -= ost[ud] * is[ud];
      idx[ud] = 0;
    }
  }
  Shape out_shape;
  if (keepdims) {
    out_shape = keep;
  } else {
    for (size_t i = 0; i < r; ++i)
      if (!red[i]) out_shape.push_back(is[i]);
    if (out_shape.empty()) out_shape = {1};
    v = v.reshaped(out_shape);
  }
  const Shape in_shape = is, keep_shape = keep;
  return make_op("reduce_sum", std::move(v), {a.ptr()},
                 [in_shape, keep_shape](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {broadcast_to(reshape(g, keep_shape), in_shape)};
                 });
}

inline std::vector<int> all_axes(const Var& a) {
  std::vector<int> ax(a.shape().size());
  std::iota(ax.begin(), ax.end(), 0);
  return ax;
}

inline Var sum_all(const Var& a) { return reduce_sum(a, all_axes(a)); }

inline Var mean_all(const Var& a) {
  return affine(sum_all(a), 1.0 / static_cast<double>(a.value().numel()), 0.0);
}

inline Var reduce_mean(const Var& a, std::vector<int> axes, bool keepdims = false) {
  int64_t cnt = 1;
  for (int ax : axes) cnt *= a.shape()[static_cast<size_t>(ax)];
  return affine(reduce_sum(a, std::move(axes), keepdims), 1.0 / static_cast<double>(cnt), 0.0);
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen-backed kernels; adjoints stay in the closed family)

inline void check_matmul(const Shape& a, const Shape& b, int64_t ka, int64_t kb,
                         const char* who) {
  if (a.size() != 2 || b.size() != 2 || ka != kb)
    throw ShapeError(std::string(who) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
}

inline Var matmul(const Var& a, const Var& b);
inline Var matmul_tn(const Var& a, const Var& b);
inline Var matmul_nt(const Var& a, const Var& b);

inline Var matmul(const Var& a, const Var& b) {
  const Shape &as = a.shape(), &bs = b.shape();
  check_matmul(as, bs, as.size() == 2 ? as[1] : -1, bs.size() == 2 ? bs[0] : -2, "matmul");
  Tensor v({as[0], bs[1]});
  detail::EMap(v.mutable_data(), as[0], bs[1]).noalias() =
      detail::as_matrix(a.value(), as[0], as[1]) * detail::as_matrix(b.value(), bs[0], bs[1]);
  return make_op("matmul", std::move(v), {a.ptr(), b.ptr()},
                 [](const NodePtr& self, const Var& g) -> std::vector<Var> {
                   Var a_in(self->inputs[0]), b_in(self->inputs[1]);
                   return {matmul_nt(g, b_in), matmul_tn(a_in, g)};
                 });
}

// a^T * b with a:[k,m], b:[k,n]
inline Var matmul_tn(const Var& a, const Var& b) {
  const Shape &as = a.shape(), &bs = b.shape();
  check_matmul(as, bs, as.size() == 2 ? as[0] : -1, bs.size() == 2 ? bs[0] : -2, "matmul_tn");
  Tensor v({as[1], bs[1]});
  detail::EMap(v.mutable_data(), as[1], bs[1]).noalias() =
      detail::as_matrix(a.value(), as[0], as[1]).transpose() *
      detail::as_matrix(b.value(), bs[0], bs[1]);
  return make_op("matmul_tn", std::move(v), {a.ptr(), b.ptr()},
                 [](const NodePtr& self, const Var& g) -> std::vector<Var> {
                   Var a_in(self->inputs[0]), b_in(self->inputs[1]);
                   return {matmul_nt(b_in, g), matmul(a_in, g)};
                 });
}

// a * b^T with a:[m,k], b:[n,k]
inline Var matmul_nt(const Var& a, const Var& b) {
  const Shape &as = a.shape(), &bs = b.shape();
  check_matmul(as, bs, as.size() == 2 ? as[1] : -1, bs.size() == 2 ? bs[1] : -2, "matmul_nt");
  Tensor v({as[0], bs[0]});
  detail::EMap(v.mutable_data(), as[0], bs[0]).noalias() =
      detail::as_matrix(a.value(), as[0], as[1]) *
      detail::as_matrix(b.value(), bs[0], bs[1]).transpose();
  return make_op("matmul_nt", std::move(v), {a.ptr(), b.ptr()},
                 [](const NodePtr& self, const Var& g) -> std::vector<Var> {
                   Var a_in(self->inputs[0]), b_in(self->inputs[1]);
                   return {matmul(g, b_in), matmul_tn(g, a_in)};
                 });
}

inline Var transpose2d(const Var& a) { return permute(a, {1, 0}); }

// ---------------------------------------------------------------------------
// Batch axis surgery

inline Var slice_batch(const Var& a, int64_t start, int64_t len);
inline Var embed_batch(const Var& a, int64_t start, int64_t total);

inline Var slice_batch(const Var& a, int64_t start, int64_t len) {
  const Shape& is = a.shape();
  if (is.empty() || start < 0 || start + len > is[0])
    throw ShapeError("slice_batch range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + shape_str(is));
  Shape os = is;
  os[0] = len;
  Tensor v(os);
  const int64_t inner = a.value().numel() / is[0];
  std::memcpy(v.mutable_data(), a.value().data() + start * inner,
              sizeof(double) * static_cast<size_t>(len * inner));
  const int64_t total = is[0];
  return make_op("slice_batch", std::move(v), {a.ptr()},
                 [start, total](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {embed_batch(g, start, total)};
                 });
}

inline Var embed_batch(const Var& a, int64_t start, int64_t total) {
  const Shape& is = a.shape();
  Shape os = is;
  os[0] = total;
  Tensor v(os);  // zero-filled
  const int64_t inner = a.value().numel() / is[0];
  std::memcpy(v.mutable_data() + start * inner, a.value().data(),
              sizeof(double) * static_cast<size_t>(a.value().numel()));
  const int64_t len = is[0];
  return make_op("embed_batch", std::move(v), {a.ptr()},
                 [start, len](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {slice_batch(g, start, len)};
                 });
}

inline Var select_batch(const Var& a, int64_t b) { return slice_batch(a, b, 1); }

inline Var concat_batch(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch of zero parts");
  Shape os = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    if (ps.size() != os.size() ||
        !std::equal(ps.begin() + 1, ps.end(), os.begin() + 1))
      throw ShapeError("concat_batch parts disagree: " + shape_str(os) + " vs " +
                       shape_str(ps));
    total += ps[0];
  }
  os[0] = total;
  Tensor v(os);
  std::vector<NodePtr> inputs;
  std::vector<int64_t> starts, lens;
  int64_t off = 0;
  const int64_t inner = numel_of(os) / total;
  for (const auto& p : parts) {
    std::memcpy(v.mutable_data() + off * inner, p.value().data(),
                sizeof(double) * static_cast<size_t>(p.value().numel()));
    inputs.push_back(p.ptr());
    starts.push_back(off);
    lens.push_back(p.shape()[0]);
    off += p.shape()[0];
  }
  return make_op("concat_batch", std::move(v), std::move(inputs),
                 [starts, lens](const NodePtr&, const Var& g) -> std::vector<Var> {
                   std::vector<Var> gs;
                   gs.reserve(starts.size());
                   for (size_t i = 0; i < starts.size(); ++i)
                     gs.push_back(slice_batch(g, starts[i], lens[i]));
                   return gs;
                 });
}

// ---------------------------------------------------------------------------
// backward

// Reverse-mode sweep from a scalar loss. Returns one gradient per entry of
// `wrt`, zeros for leaves the loss does not reach. With create_graph=true the
// returned gradients are live graph values, differentiable in their own right.
inline std::vector<Var> backward(const Var& loss, const std::vector<Var>& wrt,
                                 bool create_graph = false) {
  if (loss.value().numel() != 1) throw ShapeError("loss must be scalar");

  // Topological order over the requires_grad subgraph (iterative DFS).
  std::vector<Node*> topo;
  if (loss.requires_grad()) {
    std::unordered_map<Node*, uint8_t> state;  // 1 = open, 2 = done
    std::vector<Node*> stack{loss.node()};
    while (!stack.empty()) {
      Node* n = stack.back();
      uint8_t& st = state[n];
      if (st == 0) {
        st = 1;
        for (const auto& in : n->inputs)
          if (in->requires_grad && state[in.get()] == 0) stack.push_back(in.get());
      } else {
        stack.pop_back();
        if (st == 1) {
          st = 2;
          topo.push_back(n);
        }
      }
    }
  }

  std::unordered_set<Node*> wanted;
  for (const auto& w : wrt) wanted.insert(w.node());

  std::unordered_map<Node*, Var> adj;
  {
    GradModeGuard guard(create_graph);
    if (!topo.empty())
      adj[loss.node()] = constant(Tensor::full(loss.shape(), 1.0));
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* n = *it;
      auto a = adj.find(n);
      if (a == adj.end()) continue;  // not on a path from the loss
      if (n->vjp) {
        std::vector<Var> gs = n->vjp(n->shared_from_this(), a->second);
        for (size_t i = 0; i < n->inputs.size(); ++i) {
          Node* in = n->inputs[i].get();
          if (!in->requires_grad || !gs[i].defined()) continue;
          auto cur = adj.find(in);
          if (cur == adj.end()) adj.emplace(in, gs[i]);
          else cur->second = add(cur->second, gs[i]);
        }
      }
      if (!wanted.count(n)) adj.erase(n);  // free as soon as all consumers ran
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = adj.find(w.node());
    if (it != adj.end()) out.push_back(it->second);
    else out.push_back(constant(Tensor::zeros(w.shape())));
  }
  return out;
}

inline Var grad_of(const Var& loss, const Var& wrt, bool create_graph = false) {
  return backward(loss, {wrt}, create_graph)[0];
}

// ---------------------------------------------------------------------------
// Common composites

// Shift by the detached row max before exponentiating. The shift is constant
// with respect to x and softmax is shift invariant, so values and gradients
// are exact while overflow is impossible.
inline Var softmax(const Var& x, int axis) {
  const Shape& s = x.shape();
  if (axis < 0 || static_cast<size_t>(axis) >= s.size())
    throw ShapeError("softmax axis out of range for " + shape_str(s));
  Shape keep = s;
  keep[static_cast<size_t>(axis)] = 1;
  Tensor mx = Tensor::full(keep, -std::numeric_limits<double>::infinity());
  {
    const Shape st = detail::broadcast_strides(keep, s);
    const double* p = x.value().data();
    double* m = mx.mutable_data();
    std::vector<int64_t> idx(s.size(), 0);
    int64_t dst = 0;
    const int64_t n = x.value().numel();
    for (int64_t i = 0; i < n; ++i) {
      if (p[i] > m[dst]) m[dst] = p[i];
      for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
        const size_t ud = static_cast<size_t>(d);
        dst += st[ud];
        if (++idx[ud] < s[ud]) break;
        dst -= st[ud] * s[ud];
        idx[ud] = 0;
      }
    }
  }
  Var e = exp(sub(x, constant(mx)));
  return div(e, reduce_sum(e, {axis}, /*keepdims=*/true));
}

inline Var l1_loss(const Var& a, const Var& b) { return mean_all(abs(sub(a, b))); }

inline Var mse_loss(const Var& a, const Var& b) {
  Var d = sub(a, b);
  return mean_all(mul(d, d));
}

}  // namespace metasr
