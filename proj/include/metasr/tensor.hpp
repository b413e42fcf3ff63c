#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "metasr/common.hpp"

namespace metasr {

// Dense row-major f64 tensor. Copies are cheap (the buffer is shared) and
// tensors are treated as immutable once they leave the function that filled
// them; mutation happens only through mutable_data() right after creation.
class Tensor {
 public:
  Tensor() : shape_{0}, data_(std::make_shared<std::vector<double>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(checked_numel(shape_), 0.0)) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (static_cast<int64_t>(data_->size()) != checked_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.mutable_data(), t.mutable_data() + t.numel(), v);
    return t;
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    double* p = t.mutable_data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.uniform(lo, hi);
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    Tensor t(std::move(shape));
    double* p = t.mutable_data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = mean + stddev * rng.normal();
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_->size()); }

  const double* data() const { return data_->data(); }
  double* mutable_data() { return data_->data(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
  }

  double at(std::initializer_list<int64_t> idx) const {
    return (*data_)[static_cast<size_t>(offset(idx))];
  }

  int64_t offset(std::initializer_list<int64_t> idx) const {
    int64_t off = 0;
    int i = 0;
    for (int64_t v : idx) off = off * shape_[static_cast<size_t>(i++)] + v;
    return off;
  }

  Tensor clone() const {
    Tensor t(shape_);
    std::memcpy(t.mutable_data(), data(), sizeof(double) * static_cast<size_t>(numel()));
    return t;
  }

  // Same buffer, new shape. Legal because tensors are immutable.
  Tensor reshaped(Shape shape) const {
    if (numel_of(shape) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double abs_max() const {
    double m = 0.0;
    for (double v : *data_) m = std::max(m, std::abs(v));
    return m;
  }

  bool bit_equal(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    return std::memcmp(data(), o.data(), sizeof(double) * static_cast<size_t>(numel())) == 0;
  }

 private:
  static int64_t checked_numel(const Shape& s) {
    for (int64_t d : s)
      if (d < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(s));
    return numel_of(s);
  }

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
};

// Named tensors in a definite order, the currency of serialization.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

inline Shape row_major_strides(const Shape& shape) {
  Shape st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] =
        st[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
  return st;
}

}  // namespace metasr
