#include "camid/tensor.hpp"

#include <cmath>
#include <sstream>

#include "camid/errors.hpp"

namespace camid {

std::size_t shape_product(const Shape& s) {
  std::size_t p = 1;
  for (std::size_t e : s) p *= e;
  return p;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> strides(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * s[i];
  }
  return strides;
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (data.size() != shape_product(shape)) {
    throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
}

static std::size_t flat_index(const Shape& shape, std::initializer_list<std::size_t> idx) {
  if (idx.size() != shape.size()) {
    throw ShapeError("Tensor::at: got " + std::to_string(idx.size()) + " indices for shape " +
                     shape_str(shape));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= shape[axis]) {
      throw ShapeError("Tensor::at: index " + std::to_string(i) + " out of range for axis " +
                       std::to_string(axis) + " of shape " + shape_str(shape));
    }
    flat = flat * shape[axis] + i;
    ++axis;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<std::size_t> idx) { return data[flat_index(shape, idx)]; }

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  return data[flat_index(shape, idx)];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace camid
