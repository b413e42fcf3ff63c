#pragma once

// Spatial ops on (n, c, h, w) tensors. Convolutions lower to im2col plus a
// GEMM; the im2col buffer is not kept alive by the graph, the adjoint rule
// re-derives it from the saved input instead, trading compute for memory.

#include "metasr/autograd.hpp"

namespace metasr {

inline void check_nchw(const Shape& s, const char* who) {
  if (s.size() != 4) throw ShapeError(std::string(who) + " wants (n,c,h,w), got " + shape_str(s));
}

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t pad) {
  const int64_t out = in + 2 * pad - k + 1;
  if (out <= 0)
    throw ShapeError("kernel " + std::to_string(k) + " too large for extent " +
                     std::to_string(in) + " with pad " + std::to_string(pad));
  return out;
}

namespace detail {

// Patch matrix of x: rows (ci*k+ky)*k+kx, columns (b*oh+oy)*ow+ox.
inline Tensor im2col_values(const Tensor& x, int64_t k, int64_t pad) {
  const Shape& s = x.shape();
  const int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  const int64_t oh = conv_out_extent(h, k, pad), ow = conv_out_extent(w, k, pad);
  Tensor m({c * k * k, n * oh * ow});
  double* o = m.mutable_data();
  const double* p = x.data();
  const int64_t cols = n * oh * ow;
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) {
        double* row = o + ((ci * k + ky) * k + kx) * cols;
        for (int64_t b = 0; b < n; ++b) {
          const double* img = p + (b * c + ci) * h * w;
          for (int64_t oy = 0; oy < oh; ++oy) {
            const int64_t y = oy + ky - pad;
            double* dst = row + (b * oh + oy) * ow;
            if (y < 0 || y >= h) continue;  // zero padding, already zero-filled
            const int64_t x0 = std::max<int64_t>(0, pad - kx);
            const int64_t x1 = std::min<int64_t>(ow, w + pad - kx);
            const double* src = img + y * w + (x0 + kx - pad);
            for (int64_t ox = x0; ox < x1; ++ox) dst[ox] = src[ox - x0];
          }
        }
      }
  return m;
}

// Scatter-add dual of im2col_values.
inline Tensor col2im_values(const Tensor& m, int64_t n, int64_t c, int64_t h, int64_t w,
                            int64_t k, int64_t pad) {
  const int64_t oh = conv_out_extent(h, k, pad), ow = conv_out_extent(w, k, pad);
  if (m.shape() != Shape{c * k * k, n * oh * ow})
    throw ShapeError("col2im got " + shape_str(m.shape()));
  Tensor x({n, c, h, w});
  double* o = x.mutable_data();
  const double* p = m.data();
  const int64_t cols = n * oh * ow;
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) {
        const double* row = p + ((ci * k + ky) * k + kx) * cols;
        for (int64_t b = 0; b < n; ++b) {
          double* img = o + (b * c + ci) * h * w;
          for (int64_t oy = 0; oy < oh; ++oy) {
            const int64_t y = oy + ky - pad;
            if (y < 0 || y >= h) continue;
            const double* src = row + (b * oh + oy) * ow;
            const int64_t x0 = std::max<int64_t>(0, pad - kx);
            const int64_t x1 = std::min<int64_t>(ow, w + pad - kx);
            double* dst = img + y * w + (x0 + kx - pad);
            for (int64_t ox = x0; ox < x1; ++ox) dst[ox - x0] += src[ox];
          }
        }
      }
  return x;
}

}  // namespace detail

inline Var im2col(const Var& x, int64_t k, int64_t pad);
inline Var col2im(const Var& m, int64_t n, int64_t c, int64_t h, int64_t w, int64_t k,
                  int64_t pad);

inline Var im2col(const Var& x, int64_t k, int64_t pad) {
  check_nchw(x.shape(), "im2col");
  const Shape s = x.shape();
  Tensor v = detail::im2col_values(x.value(), k, pad);
  return make_op("im2col", std::move(v), {x.ptr()},
                 [s, k, pad](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {col2im(g, s[0], s[1], s[2], s[3], k, pad)};
                 });
}

inline Var col2im(const Var& m, int64_t n, int64_t c, int64_t h, int64_t w, int64_t k,
                  int64_t pad) {
  Tensor v = detail::col2im_values(m.value(), n, c, h, w, k, pad);
  return make_op("col2im", std::move(v), {m.ptr()},
                 [k, pad](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {im2col(g, k, pad)};
                 });
}

// conv2d: x (n,ci,h,w), w (co,ci,k,k), optional bias (co). Stride 1.
inline Var conv2d(const Var& x, const Var& w, const Var& bias, int64_t pad) {
  check_nchw(x.shape(), "conv2d");
  check_nchw(w.shape(), "conv2d weight");
  const Shape xs = x.shape(), ws = w.shape();
  const int64_t n = xs[0], ci = xs[1], h = xs[2], wd = xs[3];
  const int64_t co = ws[0], k = ws[2];
  if (ws[1] != ci || ws[3] != k)
    throw ShapeError("conv2d weight " + shape_str(ws) + " vs input " + shape_str(xs));
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{co})
    throw ShapeError("conv2d bias " + shape_str(bias.shape()) + " wants {" + std::to_string(co) + "}");
  const int64_t oh = conv_out_extent(h, k, pad), ow = conv_out_extent(wd, k, pad);
  const int64_t cik2 = ci * k * k, cols = n * oh * ow;

  Tensor m = detail::im2col_values(x.value(), k, pad);
  Tensor y2d({co, cols});
  detail::EMap(y2d.mutable_data(), co, cols).noalias() =
      detail::as_matrix(w.value(), co, cik2) * detail::as_matrix(m, cik2, cols);

  Tensor out({n, co, oh, ow});
  {
    double* o = out.mutable_data();
    const double* p = y2d.data();
    const double* bp = has_bias ? bias.value().data() : nullptr;
    const int64_t hw = oh * ow;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t c0 = 0; c0 < co; ++c0) {
        const double* src = p + c0 * cols + b * hw;
        double* dst = o + (b * co + c0) * hw;
        const double add_b = bp ? bp[c0] : 0.0;
        for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + add_b;
      }
  }

  std::vector<NodePtr> inputs{x.ptr(), w.ptr()};
  if (has_bias) inputs.push_back(bias.ptr());
  return make_op(
      "conv2d", std::move(out), std::move(inputs),
      [xs, ws, k, pad, co, cols, cik2, has_bias](const NodePtr& self,
                                                 const Var& g) -> std::vector<Var> {
        Var x_in(self->inputs[0]), w_in(self->inputs[1]);
        Var g2d = reshape(permute(g, {1, 0, 2, 3}), {co, cols});
        Var w2d = reshape(w_in, {co, cik2});
        Var dx = col2im(matmul_tn(w2d, g2d), xs[0], xs[1], xs[2], xs[3], k, pad);
        Var dw = reshape(matmul_nt(g2d, im2col(x_in, k, pad)), ws);
        std::vector<Var> gs{dx, dw};
        if (has_bias) gs.push_back(reduce_sum(g, {0, 2, 3}));
        return gs;
      });
}

inline Var conv2d(const Var& x, const Var& w, int64_t pad) {
  return conv2d(x, w, Var(), pad);
}

// Per-sample kernels: x (n,ci,h,w), kernels (n,co,ci,k,k) -> (n,co,oh,ow).
inline Var conv2d_dynamic(const Var& x, const Var& kernels, int64_t pad) {
  check_nchw(x.shape(), "conv2d_dynamic");
  const Shape xs = x.shape(), ks = kernels.shape();
  if (ks.size() != 5 || ks[0] != xs[0] || ks[2] != xs[1] || ks[3] != ks[4])
    throw ShapeError("conv2d_dynamic kernels " + shape_str(ks) + " vs input " + shape_str(xs));
  const int64_t n = xs[0], ci = xs[1], h = xs[2], w = xs[3];
  const int64_t co = ks[1], k = ks[3];
  const int64_t oh = conv_out_extent(h, k, pad), ow = conv_out_extent(w, k, pad);
  const int64_t cik2 = ci * k * k, hw = oh * ow;

  Tensor out({n, co, oh, ow});
  for (int64_t b = 0; b < n; ++b) {
    Tensor xb = Tensor::zeros({1, ci, h, w});
    std::memcpy(xb.mutable_data(), x.value().data() + b * ci * h * w,
                sizeof(double) * static_cast<size_t>(ci * h * w));
    Tensor m = detail::im2col_values(xb, k, pad);
    detail::EMap(out.mutable_data() + b * co * hw, co, hw).noalias() =
        detail::CEMap(kernels.value().data() + b * co * cik2, co, cik2) *
        detail::as_matrix(m, cik2, hw);
  }

  return make_op(
      "conv2d_dynamic", std::move(out), {x.ptr(), kernels.ptr()},
      [xs, ks, k, pad, n, co, cik2, hw](const NodePtr& self, const Var& g) -> std::vector<Var> {
        Var x_in(self->inputs[0]), k_in(self->inputs[1]);
        std::vector<Var> dxs, dks;
        dxs.reserve(n);
        dks.reserve(n);
        for (int64_t b = 0; b < n; ++b) {
          Var gb = reshape(slice_batch(g, b, 1), {co, hw});
          Var kb = reshape(slice_batch(k_in, b, 1), {co, cik2});
          Var xb = slice_batch(x_in, b, 1);
          dxs.push_back(col2im(matmul_tn(kb, gb), 1, xs[1], xs[2], xs[3], k, pad));
          dks.push_back(reshape(matmul_nt(gb, im2col(xb, k, pad)), {1, ks[1], ks[2], ks[3], ks[4]}));
        }
        return {concat_batch(dxs), concat_batch(dks)};
      });
}

// ---------------------------------------------------------------------------
// Adaptive average pooling

namespace detail {

struct Bin {
  int64_t start, end;
};

inline std::vector<Bin> adaptive_bins(int64_t in, int64_t out) {
  if (out <= 0 || in < out)
    throw ShapeError("cannot pool extent " + std::to_string(in) + " to " + std::to_string(out));
  std::vector<Bin> bins(static_cast<size_t>(out));
  for (int64_t i = 0; i < out; ++i) {
    bins[static_cast<size_t>(i)].start = i * in / out;
    bins[static_cast<size_t>(i)].end = ((i + 1) * in + out - 1) / out;
  }
  return bins;
}

}  // namespace detail

inline Var adaptive_avg_pool(const Var& x, int64_t oh, int64_t ow);
inline Var adaptive_avg_unpool(const Var& g, int64_t h, int64_t w);

// Mean over bins [floor(i*h/oh), ceil((i+1)*h/oh)) per output cell.
inline Var adaptive_avg_pool(const Var& x, int64_t oh, int64_t ow) {
  check_nchw(x.shape(), "adaptive_avg_pool");
  const Shape s = x.shape();
  const int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  const auto rb = detail::adaptive_bins(h, oh), cb = detail::adaptive_bins(w, ow);
  Tensor out({n, c, oh, ow});
  double* o = out.mutable_data();
  const double* p = x.value().data();
  for (int64_t bc = 0; bc < n * c; ++bc) {
    const double* img = p + bc * h * w;
    double* dst = o + bc * oh * ow;
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j) {
        const auto &r = rb[static_cast<size_t>(i)], &cl = cb[static_cast<size_t>(j)];
        double acc = 0.0;
        for (int64_t y = r.start; y < r.end; ++y)
          for (int64_t x2 = cl.start; x2 < cl.end; ++x2) acc += img[y * w + x2];
        dst[i * ow + j] = acc / static_cast<double>((r.end - r.start) * (cl.end - cl.start));
      }
  }
  return make_op("adaptive_avg_pool", std::move(out), {x.ptr()},
                 [h, w](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {adaptive_avg_unpool(g, h, w)};
                 });
}

// Linear adjoint of the pool: spread g[i,j]/|bin| uniformly over its bin.
inline Var adaptive_avg_unpool(const Var& g, int64_t h, int64_t w) {
  check_nchw(g.shape(), "adaptive_avg_unpool");
  const Shape s = g.shape();
  const int64_t n = s[0], c = s[1], oh = s[2], ow = s[3];
  const auto rb = detail::adaptive_bins(h, oh), cb = detail::adaptive_bins(w, ow);
  Tensor out({n, c, h, w});
  double* o = out.mutable_data();
  const double* p = g.value().data();
  for (int64_t bc = 0; bc < n * c; ++bc) {
    const double* src = p + bc * oh * ow;
    double* img = o + bc * h * w;
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j) {
        const auto &r = rb[static_cast<size_t>(i)], &cl = cb[static_cast<size_t>(j)];
        const double v =
            src[i * ow + j] / static_cast<double>((r.end - r.start) * (cl.end - cl.start));
        for (int64_t y = r.start; y < r.end; ++y)
          for (int64_t x2 = cl.start; x2 < cl.end; ++x2) img[y * w + x2] += v;
      }
  }
  return make_op("adaptive_avg_unpool", std::move(out), {g.ptr()},
                 [oh, ow](const NodePtr&, const Var& g2) -> std::vector<Var> {
                   return {adaptive_avg_pool(g2, oh, ow)};
                 });
}

// Split (n,c,h,w) into a KxK grid of subpatches and pool each to kxk:
// (n, K*K, c, k, k). Grid cells follow the same floor/ceil binning as
// adaptive pooling, so uneven extents are tolerated.
inline Var patch_pool(const Var& x, int64_t K, int64_t k);
inline Var patch_unpool(const Var& g, int64_t h, int64_t w);

namespace detail {

// Row bins for grid cell ty, inner cell iy: adaptive tile, then adaptive
// pool inside the tile.
inline std::vector<Bin> nested_bins(int64_t extent, int64_t K, int64_t k) {
  const auto tiles = adaptive_bins(extent, K);
  std::vector<Bin> out;
  out.reserve(static_cast<size_t>(K * k));
  for (const auto& t : tiles) {
    const auto inner = adaptive_bins(t.end - t.start, k);
    for (const auto& b : inner) out.push_back({t.start + b.start, t.start + b.end});
  }
  return out;
}

}  // namespace detail

inline Var patch_pool(const Var& x, int64_t K, int64_t k) {
  check_nchw(x.shape(), "patch_pool");
  const Shape s = x.shape();
  const int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  const auto rb = detail::nested_bins(h, K, k), cb = detail::nested_bins(w, K, k);
  Tensor out({n, K * K, c, k, k});
  double* o = out.mutable_data();
  const double* p = x.value().data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ty = 0; ty < K; ++ty)
      for (int64_t tx = 0; tx < K; ++tx)
        for (int64_t ci = 0; ci < c; ++ci) {
          const double* img = p + (b * c + ci) * h * w;
          double* dst = o + (((b * K * K + ty * K + tx) * c + ci) * k) * k;
          for (int64_t iy = 0; iy < k; ++iy)
            for (int64_t ix = 0; ix < k; ++ix) {
              const auto& r = rb[static_cast<size_t>(ty * k + iy)];
              const auto& cl = cb[static_cast<size_t>(tx * k + ix)];
              double acc = 0.0;
              for (int64_t y = r.start; y < r.end; ++y)
                for (int64_t x2 = cl.start; x2 < cl.end; ++x2) acc += img[y * w + x2];
              dst[iy * k + ix] =
                  acc / static_cast<double>((r.end - r.start) * (cl.end - cl.start));
            }
        }
  return make_op("patch_pool", std::move(out), {x.ptr()},
                 [h, w](const NodePtr&, const Var& g) -> std::vector<Var> {
                   return {patch_unpool(g, h, w)};
                 });
}

inline Var patch_unpool(const Var& g, int64_t h, int64_t w) {
  const Shape s = g.shape();
  if (s.size() != 5) throw ShapeError("patch_unpool wants (n,K*K,c,k,k), got " + shape_str(s));
  const int64_t n = s[0], c = s[2], k = s[3];
  const auto K = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(s[1]))));
  if (K * K != s[1]) throw ShapeError("patch_unpool: " + std::to_string(s[1]) + " not a square");
  const auto rb = detail::nested_bins(h, K, k), cb = detail::nested_bins(w, K, k);
  Tensor out({n, c, h, w});
  double* o = out.mutable_data();
  const double* p = g.value().data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ty = 0; ty < K; ++ty)
      for (int64_t tx = 0; tx < K; ++tx)
        for (int64_t ci = 0; ci < c; ++ci) {
          double* img = o + (b * c + ci) * h * w;
          const double* src = p + (((b * K * K + ty * K + tx) * c + ci) * k) * k;
          for (int64_t iy = 0; iy < k; ++iy)
            for (int64_t ix = 0; ix < k; ++ix) {
              const auto& r = rb[static_cast<size_t>(ty * k + iy)];
              const auto& cl = cb[static_cast<size_t>(tx * k + ix)];
              const double v = src[iy * k + ix] /
                               static_cast<double>((r.end - r.start) * (cl.end - cl.start));
              for (int64_t y = r.start; y < r.end; ++y)
                for (int64_t x2 = cl.start; x2 < cl.end; ++x2) img[y * w + x2] += v;
            }
        }
  const int64_t kk = k;
  return make_op("patch_unpool", std::move(out), {g.ptr()},
                 [K, kk](const NodePtr&, const Var& g2) -> std::vector<Var> {
                   return {patch_pool(g2, K, kk)};
                 });
}

// (n, c*s*s, h, w) -> (n, c, h*s, w*s), channel (c0*s+dy)*s+dx lands at
// spatial offset (dy, dx) of the upscaled pixel.
inline Var pixel_shuffle(const Var& x, int64_t s) {
  check_nchw(x.shape(), "pixel_shuffle");
  const Shape& xs = x.shape();
  if (xs[1] % (s * s) != 0)
    throw ShapeError("pixel_shuffle: channels " + std::to_string(xs[1]) + " not divisible by " +
                     std::to_string(s * s));
  const int64_t n = xs[0], c = xs[1] / (s * s), h = xs[2], w = xs[3];
  Var r = reshape(x, {n, c, s, s, h, w});
  Var t = permute(r, {0, 1, 4, 2, 5, 3});
  return reshape(t, {n, c, h * s, w * s});
}

}  // namespace metasr
