#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace miseg {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense row-major array of 64-bit floats. Copies are shallow; arrays are
// treated as immutable once they enter a computation record.
class NDArray {
 public:
  NDArray() : shape_{}, data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

  explicit NDArray(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0)) {}

  NDArray(Shape shape, std::vector<double> values);

  static NDArray scalar(double v);
  static NDArray full(Shape shape, double v);
  static NDArray zeros_like(const NDArray& other) { return NDArray(other.shape()); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  int64_t size() const { return static_cast<int64_t>(data_->size()); }

  const double* data() const { return data_->data(); }
  double* mutable_data() { return data_->data(); }

  double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  double& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }

  double scalar_value() const;

  // Row-major offset of a multi-index.
  int64_t offset(const std::vector<int>& index) const;
  double at(const std::vector<int>& index) const { return (*data_)[static_cast<size_t>(offset(index))]; }
  double& at(const std::vector<int>& index) { return (*data_)[static_cast<size_t>(offset(index))]; }

  bool all_finite() const;

  // Deep copy with its own buffer.
  NDArray clone() const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
};

}  // namespace miseg
