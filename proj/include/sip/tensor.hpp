#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace sip {

using Shape = std::vector<int>;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

std::string shape_str(const Shape& s);

/// Dense row-major tensor of 64-bit reals, rank 0..3.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor eye(int n);
  static Tensor row(std::initializer_list<double> v);       // shape {n}
  static Tensor matrix(int rows, int cols, std::initializer_list<double> v);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  int rows() const;  // rank-2 only
  int cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<const double> span() const { return data_; }
  std::span<double> span() { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& at(int i, int j);
  double at(int i, int j) const;

  double value() const;  // scalar (numel == 1)

  MatMap mat();               // rank-2 view
  ConstMatMap mat() const;
  MatMap mat_slice(int s);    // rank-3: slice s as a matrix
  ConstMatMap mat_slice(int s) const;
  VecMap vec();               // flat view
  ConstVecMap vec() const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::int64_t shape_numel(const Shape& s);

/// NumPy-style broadcast of two shapes; throws on incompatibility.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace sip
