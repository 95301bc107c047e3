#include "katrec/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "katrec/error.hpp"

namespace katrec::ad {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  if (shape_.empty()) shape_ = {1};
  for (auto d : shape_) {
    if (d == 0) fail("Tensor", "zero-sized dimension in shape ", shape_string(shape_));
  }
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) shape_ = {1};
  if (shape_size(shape_) != data_.size()) {
    fail("Tensor", "shape ", shape_string(shape_), " does not match ", data_.size(), " values");
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

double Tensor::item() const {
  if (data_.size() != 1) fail("Tensor::item", "tensor of shape ", shape_string(shape_), " is not a scalar");
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void accumulate(Tensor& out, const Tensor& a) {
  if (out.size() != a.size()) {
    fail("accumulate", "shape mismatch ", shape_string(out.shape()), " vs ", shape_string(a.shape()));
  }
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += x[i];
}

}  // namespace katrec::ad
