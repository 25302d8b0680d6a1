#include "miseg/ndarray.hpp"

#include <cmath>
#include <stdexcept>

namespace miseg {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

NDArray::NDArray(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(values))) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_->size())) {
    throw std::invalid_argument("shape " + shape_str(shape_) + " does not match " +
                                std::to_string(data_->size()) + " values");
  }
}

NDArray NDArray::scalar(double v) {
  NDArray a{Shape{}};
  a.mutable_data()[0] = v;
  return a;
}

NDArray NDArray::full(Shape shape, double v) {
  NDArray a{std::move(shape)};
  std::fill(a.data_->begin(), a.data_->end(), v);
  return a;
}

double NDArray::scalar_value() const {
  if (size() != 1) {
    throw std::invalid_argument("array of shape " + shape_str(shape_) + " is not a scalar");
  }
  return (*data_)[0];
}

int64_t NDArray::offset(const std::vector<int>& index) const {
  if (index.size() != shape_.size()) {
    throw std::invalid_argument("index rank " + std::to_string(index.size()) +
                                " does not match shape " + shape_str(shape_));
  }
  int64_t off = 0;
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= shape_[i]) {
      throw std::out_of_range("index out of range for shape " + shape_str(shape_));
    }
    off = off * shape_[i] + index[i];
  }
  return off;
}

bool NDArray::all_finite() const {
  const double* p = data();
  const int64_t n = size();
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(p[i])) return false;
  }
  return true;
}

NDArray NDArray::clone() const {
  NDArray copy(shape_);
  std::copy(data_->begin(), data_->end(), copy.data_->begin());
  return copy;
}

}  // namespace miseg
