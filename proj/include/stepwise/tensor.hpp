#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stepwise {

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Dense row-major float64 array of rank 1..3. Scalars are shape {1}.
// grad is either empty or the same length as data.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape_);
  Tensor(std::vector<int> shape_, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<int> shape_);
  static Tensor full(std::vector<int> shape_, double v);

  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int axis) const;

  double& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(std::int64_t i, std::int64_t j) {
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }
  double at(std::int64_t i, std::int64_t j) const {
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }
  double& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  double at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }

  void ensure_grad();
  void zero_grad();
  bool all_finite() const;
  std::string shape_string() const { return shape_str(shape); }
};

}  // namespace stepwise
