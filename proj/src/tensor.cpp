#include "sip/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sip {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (int d : shape_) {
    if (d < 0) throw std::invalid_argument("Tensor: negative dimension in " + shape_str(shape_));
  }
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
    throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match data length " +
                                std::to_string(data_.size()));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = v;
  return t;
}

Tensor Tensor::eye(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::row(std::initializer_list<double> v) {
  return Tensor({static_cast<int>(v.size())}, std::vector<double>(v));
}

Tensor Tensor::matrix(int rows, int cols, std::initializer_list<double> v) {
  return Tensor({rows, cols}, std::vector<double>(v));
}

int Tensor::rows() const {
  if (rank() != 2) throw std::invalid_argument("Tensor::rows: rank-2 required, got " + shape_str(shape_));
  return shape_[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw std::invalid_argument("Tensor::cols: rank-2 required, got " + shape_str(shape_));
  return shape_[1];
}

double& Tensor::at(int i, int j) {
  return data_[static_cast<size_t>(i) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(j)];
}

double Tensor::at(int i, int j) const {
  return data_[static_cast<size_t>(i) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(j)];
}

double Tensor::value() const {
  if (numel() != 1) throw std::invalid_argument("Tensor::value: scalar required, got " + shape_str(shape_));
  return data_[0];
}

MatMap Tensor::mat() {
  if (rank() == 1) return MatMap(data_.data(), 1, shape_[0]);
  if (rank() != 2) throw std::invalid_argument("Tensor::mat: rank-2 required, got " + shape_str(shape_));
  return MatMap(data_.data(), shape_[0], shape_[1]);
}

ConstMatMap Tensor::mat() const {
  if (rank() == 1) return ConstMatMap(data_.data(), 1, shape_[0]);
  if (rank() != 2) throw std::invalid_argument("Tensor::mat: rank-2 required, got " + shape_str(shape_));
  return ConstMatMap(data_.data(), shape_[0], shape_[1]);
}

MatMap Tensor::mat_slice(int s) {
  if (rank() != 3) throw std::invalid_argument("Tensor::mat_slice: rank-3 required, got " + shape_str(shape_));
  std::int64_t stride = static_cast<std::int64_t>(shape_[1]) * shape_[2];
  return MatMap(data_.data() + s * stride, shape_[1], shape_[2]);
}

ConstMatMap Tensor::mat_slice(int s) const {
  if (rank() != 3) throw std::invalid_argument("Tensor::mat_slice: rank-3 required, got " + shape_str(shape_));
  std::int64_t stride = static_cast<std::int64_t>(shape_[1]) * shape_[2];
  return ConstMatMap(data_.data() + s * stride, shape_[1], shape_[2]);
}

VecMap Tensor::vec() { return VecMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }

ConstVecMap Tensor::vec() const {
  return ConstVecMap(data_.data(), static_cast<Eigen::Index>(data_.size()));
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw std::invalid_argument("Tensor::reshaped: " + shape_str(shape_) + " -> " + shape_str(shape) +
                                " changes element count");
  return Tensor(std::move(shape), data_);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (size_t i = 0; i < out.size(); ++i) {
    int da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    out[out.size() - 1 - i] = std::max(da, db);
  }
  return out;
}

}  // namespace sip
