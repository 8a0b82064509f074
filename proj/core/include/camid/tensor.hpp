#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace camid {

using Shape = std::vector<std::size_t>;

std::size_t shape_product(const Shape& s);
std::string shape_str(const Shape& s);

/// Row-major strides for a shape (innermost stride is 1).
std::vector<std::size_t> row_major_strides(const Shape& s);

/// Dense n-dimensional array of 64-bit floats, row-major.
///
/// Dimension order is [batch, channel, height, width] for image-like data
/// and [batch, token, feature] for sequences. Tensors are treated as
/// immutable once handed to a Tape; sharing across threads is safe as long
/// as nobody writes.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_product(shape), 0.0) {}
  Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_product(shape), fill) {}
  Tensor(Shape s, std::vector<double> d);

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }
  std::size_t extent(std::size_t axis) const { return shape.at(axis); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// Multi-index access (slow; tests and small code paths only).
  double& at(std::initializer_list<std::size_t> idx);
  double at(std::initializer_list<std::size_t> idx) const;

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  /// True when every element is finite (no NaN/Inf).
  bool all_finite() const;
};

}  // namespace camid
