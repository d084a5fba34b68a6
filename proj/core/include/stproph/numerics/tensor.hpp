// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace stproph::num {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major tensor of doubles. Most of the library works on rank-2
/// matrices; an N x W x d block is stored as an (N*W) x d matrix with the
/// same memory layout.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row(std::initializer_list<double> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Leading dimension for rank-2 tensors.
  std::size_t rows() const;
  /// Trailing dimension for rank-2 tensors.
  std::size_t cols() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double* row_ptr(std::size_t r) { return data_.data() + r * shape_[1]; }
  const double* row_ptr(std::size_t r) const { return data_.data() + r * shape_[1]; }

  /// Same data, new shape; throws ShapeError when element counts differ.
  Tensor reshaped(Shape shape) const;
  Tensor transposed() const;

  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Value-level dense helpers shared by oracles, report code and the autograd ops.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double s);
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);

void require_rank2(const Tensor& t, const char* what);

}  // namespace stproph::num
