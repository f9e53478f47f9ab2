#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deqflow {

using Vec = std::vector<double>;
using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < s.size(); ++i) oss << (i ? "," : "") << s[i];
  oss << ']';
  return oss.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles with explicit shape metadata.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, Vec data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Vec& values() { return data_; }
  const Vec& values() const { return data_; }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  double& operator()(Idx... idx) {
    return data_[offset_of(static_cast<std::size_t>(idx)...)];
  }
  template <typename... Idx>
  double operator()(Idx... idx) const {
    return data_[offset_of(static_cast<std::size_t>(idx)...)];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }
  Tensor& operator+=(double s) {
    for (double& v : data_) v += s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }

  bool operator==(const Tensor& o) const = default;

  void require_same_shape(const Tensor& o, const char* op) const {
    if (shape_ != o.shape_)
      throw ShapeError(std::string("shape mismatch in ") + op + ": " + shape_str(shape_) +
                       " vs " + shape_str(o.shape_));
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }

  template <typename... Idx>
  std::size_t offset_of(Idx... idx) const {
    const std::size_t ids[] = {idx...};
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizeof...(Idx); ++i) off = off * shape_[i] + ids[i];
    return off;
  }

  Shape shape_;
  Vec data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }
inline double l2_norm(const Tensor& t) { return l2_norm(t.span()); }

/// y += a * x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline Vec operator+(Vec a, const Vec& b) {
  axpy(1.0, b, a);
  return a;
}
inline Vec operator-(Vec a, const Vec& b) {
  axpy(-1.0, b, a);
  return a;
}
inline Vec operator*(double s, Vec a) {
  for (double& v : a) v *= s;
  return a;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Concatenates rank-3 tensors [C_i,H,W] along the channel axis.
inline Tensor concat_channels(std::initializer_list<const Tensor*> parts) {
  std::size_t channels = 0, h = 0, w = 0;
  for (const Tensor* p : parts) {
    if (p->rank() != 3) throw ShapeError("concat_channels expects rank-3 tensors");
    if (h == 0) {
      h = p->dim(1);
      w = p->dim(2);
    } else if (p->dim(1) != h || p->dim(2) != w) {
      throw ShapeError("concat_channels: spatial mismatch");
    }
    channels += p->dim(0);
  }
  Vec data;
  data.reserve(channels * h * w);
  for (const Tensor* p : parts) data.insert(data.end(), p->values().begin(), p->values().end());
  return Tensor({channels, h, w}, std::move(data));
}

/// Copies channels [begin, begin+count) of a rank-3 tensor.
inline Tensor slice_channels(const Tensor& t, std::size_t begin, std::size_t count) {
  if (t.rank() != 3 || begin + count > t.dim(0)) throw ShapeError("slice_channels out of range");
  const std::size_t plane = t.dim(1) * t.dim(2);
  Vec data(t.values().begin() + static_cast<std::ptrdiff_t>(begin * plane),
           t.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * plane));
  return Tensor({count, t.dim(1), t.dim(2)}, std::move(data));
}

}  // namespace deqflow
