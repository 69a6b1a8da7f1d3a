#include "stepwise/tensor.hpp"

#include <cmath>
#include <sstream>

#include "stepwise/errors.hpp"

namespace stepwise {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

static void check_shape(const std::vector<int>& shape) {
  if (shape.empty() || shape.size() > 3)
    throw ShapeError("tensor rank must be 1..3, got " + shape_str(shape));
  for (int d : shape)
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
}

Tensor::Tensor(std::vector<int> shape_) : shape(std::move(shape_)) {
  check_shape(shape);
  data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
}

Tensor::Tensor(std::vector<int> shape_, std::vector<double> values)
    : shape(std::move(shape_)), data(std::move(values)) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(std::vector<int> shape_) { return Tensor(std::move(shape_)); }

Tensor Tensor::full(std::vector<int> shape_, double v) {
  Tensor t(std::move(shape_));
  for (double& x : t.data) x = v;
  return t;
}

int Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string());
  return shape[static_cast<std::size_t>(axis)];
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace stepwise
