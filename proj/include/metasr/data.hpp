#pragma once

// Data pipeline: antialiased bicubic degradation, color conversion, aligned
// LR/HR patch sampling, deterministic batching, and a synthetic texture
// corpus generator for self-contained experiments.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "metasr/png_io.hpp"
#include "metasr/tensor.hpp"
#include "metasr/tensor_io.hpp"

namespace metasr {

// Catmull-Rom cubic, a = -0.5.
inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace detail {

struct ResampleTap {
  std::vector<int64_t> idx;   // clamped source indices, flattened per output
  std::vector<double> wgt;    // normalized weights
  int64_t taps;
};

// Tap table for one axis, in -> out. Antialiasing widens the kernel by the
// scale factor when shrinking. Weights are renormalized so constants are
// preserved exactly.
inline ResampleTap make_taps(int64_t in, int64_t out, bool antialias) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double widen = antialias && scale > 1.0 ? scale : 1.0;
  const double support = 2.0 * widen;
  const int64_t taps = static_cast<int64_t>(std::ceil(support)) * 2 + 1;
  ResampleTap t;
  t.taps = taps;
  t.idx.resize(static_cast<size_t>(out * taps));
  t.wgt.assign(static_cast<size_t>(out * taps), 0.0);
  for (int64_t i = 0; i < out; ++i) {
    const double center = (static_cast<double>(i) + 0.5) * scale - 0.5;
    const int64_t lo = static_cast<int64_t>(std::ceil(center - support));
    double sum = 0.0;
    for (int64_t k = 0; k < taps; ++k) {
      const int64_t j = lo + k;
      const double w = cubic_kernel((static_cast<double>(j) - center) / widen) / widen;
      const int64_t cj = std::clamp<int64_t>(j, 0, in - 1);
      t.idx[static_cast<size_t>(i * taps + k)] = cj;
      t.wgt[static_cast<size_t>(i * taps + k)] = w;
      sum += w;
    }
    for (int64_t k = 0; k < taps; ++k) t.wgt[static_cast<size_t>(i * taps + k)] /= sum;
  }
  return t;
}

}  // namespace detail

// Separable cubic resampling of a (c,h,w) image to (c,oh,ow).
inline Tensor resize_bicubic(const Tensor& img, int64_t oh, int64_t ow, bool antialias = true) {
  if (img.rank() != 3) throw ShapeError("resize wants (c,h,w), got " + shape_str(img.shape()));
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const auto rt = detail::make_taps(h, oh, antialias);
  const auto ct = detail::make_taps(w, ow, antialias);

  Tensor rows({c, oh, w});
  {
    const double* p = img.data();
    double* o = rows.mutable_data();
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int64_t k = 0; k < rt.taps; ++k)
            acc += rt.wgt[static_cast<size_t>(i * rt.taps + k)] *
                   p[(ch * h + rt.idx[static_cast<size_t>(i * rt.taps + k)]) * w + x];
          o[(ch * oh + i) * w + x] = acc;
        }
  }
  Tensor out({c, oh, ow});
  {
    const double* p = rows.data();
    double* o = out.mutable_data();
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (int64_t k = 0; k < ct.taps; ++k)
            acc += ct.wgt[static_cast<size_t>(j * ct.taps + k)] *
                   p[(ch * oh + i) * w + ct.idx[static_cast<size_t>(j * ct.taps + k)]];
          o[(ch * oh + i) * ow + j] = acc;
        }
  }
  return out;
}

inline Tensor bicubic_downscale(const Tensor& img, int64_t s, bool antialias = true) {
  if (img.rank() != 3) throw ShapeError("downscale wants (c,h,w)");
  if (s < 1 || img.dim(1) % s != 0 || img.dim(2) % s != 0)
    throw ShapeError("image " + shape_str(img.shape()) + " not divisible by scale " +
                     std::to_string(s));
  return resize_bicubic(img, img.dim(1) / s, img.dim(2) / s, antialias);
}

inline Tensor bicubic_upscale(const Tensor& img, int64_t s) {
  if (img.rank() != 3) throw ShapeError("upscale wants (c,h,w)");
  return resize_bicubic(img, img.dim(1) * s, img.dim(2) * s, false);
}

// ---------------------------------------------------------------------------
// Color

// Digital-range YCbCr from [0,1] RGB (BT.601): Y in [16/255, 235/255].
inline Tensor rgb_to_ycbcr(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw ShapeError("rgb_to_ycbcr wants (3,h,w), got " + shape_str(img.shape()));
  const int64_t h = img.dim(1), w = img.dim(2), hw = h * w;
  Tensor out({3, h, w});
  const double* r = img.data();
  const double* g = r + hw;
  const double* b = g + hw;
  double* y = out.mutable_data();
  double* cb = y + hw;
  double* cr = cb + hw;
  for (int64_t i = 0; i < hw; ++i) {
    y[i] = (16.0 + 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i]) / 255.0;
    cb[i] = (128.0 - 37.797 * r[i] - 74.203 * g[i] + 112.0 * b[i]) / 255.0;
    cr[i] = (128.0 + 112.0 * r[i] - 93.786 * g[i] - 18.214 * b[i]) / 255.0;
  }
  return out;
}

// Y channel scaled to [0,255], the working range of the quality metrics.
inline Tensor y_channel_255(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw ShapeError("y_channel_255 wants (3,h,w), got " + shape_str(img.shape()));
  const int64_t h = img.dim(1), w = img.dim(2), hw = h * w;
  Tensor y({1, h, w});
  const double* r = img.data();
  const double* g = r + hw;
  const double* b = g + hw;
  double* o = y.mutable_data();
  for (int64_t i = 0; i < hw; ++i)
    o[i] = 16.0 + 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i];
  return y;
}

// ---------------------------------------------------------------------------
// Pairs, patches, batches

struct ImagePair {
  Tensor hr;  // (3,H,W) in [0,1]
  Tensor lr;  // (3,H/s,W/s)
  std::string id;
};

inline ImagePair make_image_pair(Tensor hr, int64_t scale, std::string id,
                                 bool antialias = true) {
  ImagePair p;
  p.lr = bicubic_downscale(hr, scale, antialias);
  p.hr = std::move(hr);
  p.id = std::move(id);
  return p;
}

inline void save_image_pair(const std::string& path, const ImagePair& p) {
  Checkpoint ck;
  ck.meta["kind"] = "pair";
  ck.meta["id"] = p.id;
  ck.tensors.emplace_back("hr", p.hr);
  ck.tensors.emplace_back("lr", p.lr);
  save_checkpoint(path, ck);
}

inline ImagePair load_image_pair(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  auto kind = ck.meta.find("kind");
  if (kind == ck.meta.end() || kind->second != "pair")
    throw IoError(path + " does not hold an image pair");
  ImagePair p;
  p.hr = ck.at("hr");
  p.lr = ck.at("lr");
  p.id = ck.meta.count("id") ? ck.meta.at("id") : "";
  return p;
}

struct Batch {
  Tensor lr;  // (b,3,p,p)
  Tensor hr;  // (b,3,sp,sp)
};

namespace detail {

inline void copy_window(double* dst, const Tensor& src, int64_t y0, int64_t x0, int64_t p) {
  const int64_t c = src.dim(0), h = src.dim(1), w = src.dim(2);
  (void)h;
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < p; ++y)
      std::memcpy(dst + (ch * p + y) * p, src.data() + (ch * h + y0 + y) * w + x0,
                  sizeof(double) * static_cast<size_t>(p));
}

}  // namespace detail

// Draws aligned LR/HR patch pairs; with augmentation, applies the same flip
// and quarter-turn to both windows.
class BatchSampler {
 public:
  BatchSampler(const std::vector<ImagePair>* corpus, int64_t batch, int64_t patch, int64_t scale,
               Rng rng, bool augment = false)
      : corpus_(corpus), batch_(batch), patch_(patch), scale_(scale), rng_(rng),
        augment_(augment) {
    if (!corpus_ || corpus_->empty()) throw ConfigError("batch sampler needs a corpus");
    for (const auto& p : *corpus_) {
      if (p.lr.dim(1) < patch_ || p.lr.dim(2) < patch_)
        throw ConfigError("patch " + std::to_string(patch_) + " exceeds image " + p.id);
      if (p.hr.dim(1) != p.lr.dim(1) * scale_ || p.hr.dim(2) != p.lr.dim(2) * scale_)
        throw ConfigError("pair " + p.id + " does not match scale " + std::to_string(scale_));
    }
  }

  Batch next() {
    const int64_t sp = patch_ * scale_;
    Batch b{Tensor({batch_, 3, patch_, patch_}), Tensor({batch_, 3, sp, sp})};
    for (int64_t i = 0; i < batch_; ++i) {
      const auto& pair = (*corpus_)[static_cast<size_t>(
          rng_.uniform_int(static_cast<int64_t>(corpus_->size())))];
      const int64_t y0 = rng_.uniform_int(pair.lr.dim(1) - patch_ + 1);
      const int64_t x0 = rng_.uniform_int(pair.lr.dim(2) - patch_ + 1);
      detail::copy_window(b.lr.mutable_data() + i * 3 * patch_ * patch_, pair.lr, y0, x0, patch_);
      detail::copy_window(b.hr.mutable_data() + i * 3 * sp * sp, pair.hr, y0 * scale_,
                          x0 * scale_, sp);
      if (augment_) {
        const bool hflip = rng_.uniform() < 0.5;
        const bool vflip = rng_.uniform() < 0.5;
        const bool rot = rng_.uniform() < 0.5;
        apply_aug(b.lr.mutable_data() + i * 3 * patch_ * patch_, patch_, hflip, vflip, rot);
        apply_aug(b.hr.mutable_data() + i * 3 * sp * sp, sp, hflip, vflip, rot);
      }
    }
    return b;
  }

 private:
  static void apply_aug(double* img, int64_t p, bool hflip, bool vflip, bool rot) {
    std::vector<double> tmp(static_cast<size_t>(p * p));
    for (int64_t c = 0; c < 3; ++c) {
      double* ch = img + c * p * p;
      std::memcpy(tmp.data(), ch, sizeof(double) * static_cast<size_t>(p * p));
      for (int64_t y = 0; y < p; ++y)
        for (int64_t x = 0; x < p; ++x) {
          int64_t sy = vflip ? p - 1 - y : y;
          int64_t sx = hflip ? p - 1 - x : x;
          if (rot) std::swap(sy, sx);
          ch[y * p + x] = tmp[static_cast<size_t>(sy * p + sx)];
        }
    }
  }

  const std::vector<ImagePair>* corpus_;
  int64_t batch_, patch_, scale_;
  Rng rng_;
  bool augment_;
};

// ---------------------------------------------------------------------------
// Synthetic texture corpus: oriented sinusoid gratings, checkerboards, and
// smoothed noise — dense regular textures.

namespace detail {

inline Tensor synth_grating(int64_t size, Rng& rng) {
  Tensor img({3, size, size});
  const double theta = rng.uniform(0.0, 3.14159265358979323846);
  const double freq = rng.uniform(2.0, 10.0) * 2.0 * 3.14159265358979323846 /
                      static_cast<double>(size);
  const double phase = rng.uniform(0.0, 6.28318530717958647692);
  const double cx = std::cos(theta), sx = std::sin(theta);
  double* p = img.mutable_data();
  for (int64_t c = 0; c < 3; ++c) {
    const double amp = rng.uniform(0.2, 0.5);
    const double off = rng.uniform(amp, 1.0 - amp);
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        const double t = freq * (cx * static_cast<double>(x) + sx * static_cast<double>(y));
        p[(c * size + y) * size + x] = off + amp * std::sin(t + phase);
      }
  }
  return img;
}

inline Tensor synth_checker(int64_t size, Rng& rng) {
  Tensor img({3, size, size});
  const int64_t cell = 2 + rng.uniform_int(7);
  const int64_t oy = rng.uniform_int(cell), ox = rng.uniform_int(cell);
  double col_a[3], col_b[3];
  for (int i = 0; i < 3; ++i) {
    col_a[i] = rng.uniform(0.0, 0.45);
    col_b[i] = rng.uniform(0.55, 1.0);
  }
  double* p = img.mutable_data();
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      const bool a = (((y + oy) / cell) + ((x + ox) / cell)) % 2 == 0;
      for (int64_t c = 0; c < 3; ++c)
        p[(c * size + y) * size + x] = a ? col_a[c] : col_b[c];
    }
  return img;
}

inline Tensor synth_smooth_noise(int64_t size, Rng& rng) {
  Tensor img({3, size, size});
  const int64_t radius = 1 + rng.uniform_int(2);
  std::vector<double> raw(static_cast<size_t>(size * size));
  std::vector<double> tmp(static_cast<size_t>(size * size));
  double* p = img.mutable_data();
  for (int64_t c = 0; c < 3; ++c) {
    for (auto& v : raw) v = rng.uniform();
    // separable box blur with clamped edges
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        double acc = 0.0;
        for (int64_t d = -radius; d <= radius; ++d)
          acc += raw[static_cast<size_t>(y * size + std::clamp<int64_t>(x + d, 0, size - 1))];
        tmp[static_cast<size_t>(y * size + x)] = acc / static_cast<double>(2 * radius + 1);
      }
    double lo = 1.0, hi = 0.0;
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        double acc = 0.0;
        for (int64_t d = -radius; d <= radius; ++d)
          acc += tmp[static_cast<size_t>(std::clamp<int64_t>(y + d, 0, size - 1) * size + x)];
        const double v = acc / static_cast<double>(2 * radius + 1);
        p[(c * size + y) * size + x] = v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    const double span = hi > lo ? hi - lo : 1.0;
    for (int64_t i = 0; i < size * size; ++i)
      p[c * size * size + i] = (p[c * size * size + i] - lo) / span;
  }
  return img;
}

}  // namespace detail

inline std::vector<ImagePair> make_synthetic_corpus(int64_t n, int64_t size, int64_t scale,
                                                    Rng& rng, bool antialias = true) {
  if (size % scale != 0)
    throw ConfigError("synthetic image size must be divisible by the scale");
  std::vector<ImagePair> corpus;
  corpus.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Rng sub = rng.child(static_cast<uint64_t>(i));
    Tensor hr;
    switch (i % 3) {
      case 0: hr = detail::synth_grating(size, sub); break;
      case 1: hr = detail::synth_checker(size, sub); break;
      default: hr = detail::synth_smooth_noise(size, sub); break;
    }
    corpus.push_back(make_image_pair(std::move(hr), scale, "synth" + std::to_string(i),
                                     antialias));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Folder loading: manifest of newline-delimited relative paths if present,
// otherwise every .png in the directory in sorted order.

inline std::vector<ImagePair> load_corpus_dir(const std::string& dir, int64_t scale,
                                              bool antialias = true,
                                              std::vector<std::string>* skipped = nullptr) {
  namespace fs = std::filesystem;
  std::vector<std::string> rels;
  const fs::path manifest = fs::path(dir) / "manifest.txt";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty()) rels.push_back(line);
    }
  } else {
    if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png")
        rels.push_back(e.path().filename().string());
    std::sort(rels.begin(), rels.end());
  }
  std::vector<ImagePair> corpus;
  for (const auto& rel : rels) {
    const std::string full = (fs::path(dir) / rel).string();
    try {
      Tensor hr = read_png(full);
      if (hr.dim(1) % scale != 0 || hr.dim(2) % scale != 0) {
        // trim to a multiple of the scale rather than rejecting
        const int64_t h = hr.dim(1) / scale * scale, w = hr.dim(2) / scale * scale;
        Tensor trimmed({3, h, w});
        for (int64_t c = 0; c < 3; ++c)
          for (int64_t y = 0; y < h; ++y)
            std::memcpy(trimmed.mutable_data() + (c * h + y) * w,
                        hr.data() + (c * hr.dim(1) + y) * hr.dim(2),
                        sizeof(double) * static_cast<size_t>(w));
        hr = trimmed;
      }
      corpus.push_back(make_image_pair(std::move(hr), scale, rel, antialias));
    } catch (const IoError&) {
      if (skipped) skipped->push_back(rel);
    }
  }
  if (corpus.empty()) throw IoError("no readable images in " + dir);
  return corpus;
}

}  // namespace metasr
