#pragma once

// Quality metrics on the luma channel in [0,255], plus whole-benchmark
// evaluation with tiled forward passes for large inputs.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "metasr/data.hpp"

namespace metasr {

// Round to the 8-bit lattice (values stay doubles in [0,255]).
inline Tensor quantize_255(const Tensor& t) {
  Tensor out(t.shape());
  double* o = out.mutable_data();
  const double* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) {
    double v = p[i];
    v = v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v);
    o[i] = std::nearbyint(v);
  }
  return out;
}

// Scale a [0,1] image to [0,255] and snap to the lattice.
inline Tensor quantize_unit(const Tensor& t) {
  Tensor s(t.shape());
  double* o = s.mutable_data();
  const double* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) o[i] = p[i] * 255.0;
  return quantize_255(s);
}

inline Tensor crop_border(const Tensor& img, int64_t crop) {
  if (crop == 0) return img;
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h <= 2 * crop || w <= 2 * crop)
    throw ShapeError("crop " + std::to_string(crop) + " swallows image " + shape_str(img.shape()));
  Tensor out({c, h - 2 * crop, w - 2 * crop});
  double* o = out.mutable_data();
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h - 2 * crop; ++y)
      std::memcpy(o + (ch * (h - 2 * crop) + y) * (w - 2 * crop),
                  img.data() + (ch * h + y + crop) * w + crop,
                  sizeof(double) * static_cast<size_t>(w - 2 * crop));
  return out;
}

// 10*log10(255^2 / MSE) after border cropping; identical inputs give +inf.
inline double psnr(const Tensor& a, const Tensor& b, int64_t crop = 0) {
  if (!a.same_shape(b))
    throw ShapeError("psnr shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor ca = crop_border(a, crop), cb = crop_border(b, crop);
  double se = 0.0;
  for (int64_t i = 0; i < ca.numel(); ++i) {
    const double d = ca.data()[i] - cb.data()[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(ca.numel());
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

namespace detail {

inline std::vector<double> gaussian_window(int64_t n, double sigma) {
  std::vector<double> w(static_cast<size_t>(n));
  const double c = static_cast<double>(n - 1) / 2.0;
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - c;
    w[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += w[static_cast<size_t>(i)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Valid-mode separable windowed mean of a (h,w) plane.
inline std::vector<double> window_mean(const double* p, int64_t h, int64_t w,
                                       const std::vector<double>& win) {
  const int64_t n = static_cast<int64_t>(win.size());
  const int64_t oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(static_cast<size_t>(oh * w));
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int64_t k = 0; k < n; ++k) acc += win[static_cast<size_t>(k)] * p[(y + k) * w + x];
      rows[static_cast<size_t>(y * w + x)] = acc;
    }
  std::vector<double> out(static_cast<size_t>(oh * ow));
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t k = 0; k < n; ++k)
        acc += win[static_cast<size_t>(k)] * rows[static_cast<size_t>(y * w + x + k)];
      out[static_cast<size_t>(y * ow + x)] = acc;
    }
  return out;
}

}  // namespace detail

// Gaussian-windowed SSIM averaged over valid positions, on [0,255] planes.
inline double ssim(const Tensor& a, const Tensor& b, int64_t window = 11, double sigma = 1.5,
                   double k1 = 0.01, double k2 = 0.03) {
  if (!a.same_shape(b))
    throw ShapeError("ssim shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int64_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  if (h < window || w < window)
    throw ShapeError("image " + shape_str(a.shape()) + " smaller than ssim window " +
                     std::to_string(window));
  const auto win = detail::gaussian_window(window, sigma);
  const double c1 = (k1 * 255.0) * (k1 * 255.0);
  const double c2 = (k2 * 255.0) * (k2 * 255.0);
  const double* pa = a.data();
  const double* pb = b.data();
  const int64_t hw = h * w;
  std::vector<double> aa(static_cast<size_t>(hw)), bb(static_cast<size_t>(hw)),
      ab(static_cast<size_t>(hw));
  for (int64_t i = 0; i < hw; ++i) {
    aa[static_cast<size_t>(i)] = pa[i] * pa[i];
    bb[static_cast<size_t>(i)] = pb[i] * pb[i];
    ab[static_cast<size_t>(i)] = pa[i] * pb[i];
  }
  const auto mu_a = detail::window_mean(pa, h, w, win);
  const auto mu_b = detail::window_mean(pb, h, w, win);
  const auto m_aa = detail::window_mean(aa.data(), h, w, win);
  const auto m_bb = detail::window_mean(bb.data(), h, w, win);
  const auto m_ab = detail::window_mean(ab.data(), h, w, win);
  double acc = 0.0;
  for (size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = m_aa[i] - ma * ma;
    const double vb = m_bb[i] - mb * mb;
    const double cov = m_ab[i] - ma * mb;
    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
           ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return acc / static_cast<double>(mu_a.size());
}

// ---------------------------------------------------------------------------
// Benchmark evaluation

struct ImageScore {
  std::string id;
  double psnr;
  double ssim;
};

struct EvalReport {
  std::vector<ImageScore> per_image;
  std::vector<std::string> skipped;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

// Maps an LR (3,h,w) image in [0,1] to its SR reconstruction.
using SrFn = std::function<Tensor(const Tensor&)>;

// Runs the model tile-wise if the LR image exceeds tile x tile: tiles overlap
// by 2*margin and only each tile's center is kept, so seams carry full
// receptive-field context.
inline Tensor sr_image_tiled(const SrFn& model, const Tensor& lr, int64_t scale,
                             int64_t tile = 64, int64_t margin = 8) {
  const int64_t h = lr.dim(1), w = lr.dim(2);
  if (h <= tile && w <= tile) return model(lr);
  Tensor out({3, h * scale, w * scale});
  double* o = out.mutable_data();
  const int64_t step = tile - 2 * margin;
  for (int64_t y0 = 0; y0 < h; y0 += step)
    for (int64_t x0 = 0; x0 < w; x0 += step) {
      const int64_t ys = std::max<int64_t>(0, std::min(y0 - margin, h - tile));
      const int64_t xs = std::max<int64_t>(0, std::min(x0 - margin, w - tile));
      const int64_t th = std::min(tile, h - ys), tw = std::min(tile, w - xs);
      Tensor patch({3, th, tw});
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < th; ++y)
          std::memcpy(patch.mutable_data() + (c * th + y) * tw,
                      lr.data() + (c * h + ys + y) * w + xs,
                      sizeof(double) * static_cast<size_t>(tw));
      Tensor sr = model(patch);
      // keep rows/cols of this tile that own the [y0, y0+step) window
      const int64_t ky0 = y0, ky1 = std::min(y0 + step, h);
      const int64_t kx0 = x0, kx1 = std::min(x0 + step, w);
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = ky0; y < ky1; ++y)
          for (int64_t x = kx0; x < kx1; ++x)
            for (int64_t dy = 0; dy < scale; ++dy)
              std::memcpy(
                  o + ((c * h * scale) + y * scale + dy) * (w * scale) + x * scale,
                  sr.data() +
                      ((c * th * scale) + (y - ys) * scale + dy) * (tw * scale) +
                      (x - xs) * scale,
                  sizeof(double) * static_cast<size_t>(scale));
    }
  return out;
}

// Quantize a [0,1] RGB image to its 8-bit representation, then take Y in
// [0,255]. Both sides of a comparison go through this so that an identity
// model scores an exact +inf.
inline Tensor eval_luma(const Tensor& rgb) {
  Tensor q = quantize_unit(rgb);
  double* p = q.mutable_data();
  for (int64_t i = 0; i < q.numel(); ++i) p[i] /= 255.0;
  return y_channel_255(q);
}

// Quantizes both sides to 8-bit, compares on the Y channel, crops a
// scale-wide border.
inline EvalReport evaluate_pairs(const SrFn& model, const std::vector<ImagePair>& pairs,
                                 int64_t scale) {
  EvalReport rep;
  double psum = 0.0, ssum = 0.0;
  for (const auto& pair : pairs) {
    Tensor sr = sr_image_tiled(model, pair.lr, scale);
    Tensor ya = eval_luma(sr);
    Tensor yb = eval_luma(pair.hr);
    ImageScore s{pair.id, psnr(ya, yb, scale),
                 ssim(crop_border(ya, scale), crop_border(yb, scale))};
    psum += s.psnr;
    ssum += s.ssim;
    rep.per_image.push_back(s);
  }
  if (!rep.per_image.empty()) {
    rep.mean_psnr = psum / static_cast<double>(rep.per_image.size());
    rep.mean_ssim = ssum / static_cast<double>(rep.per_image.size());
  }
  return rep;
}

// Folder benchmark: HR images are read from `dir` (manifest.txt or sorted
// *.png), LR counterparts are synthesized by bicubic downscaling, and
// unreadable files are skipped with a note in the report.
inline EvalReport evaluate_benchmark(const SrFn& model, const std::string& dir,
                                     int64_t scale) {
  std::vector<std::string> skipped;
  const auto pairs = load_corpus_dir(dir, scale, true, &skipped);
  EvalReport rep = evaluate_pairs(model, pairs, scale);
  rep.skipped = std::move(skipped);
  return rep;
}

}  // namespace metasr
