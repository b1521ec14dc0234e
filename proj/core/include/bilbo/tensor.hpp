#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace bilbo {

/// Thrown when operand shapes do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a caller violates a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
/// Tensor storage. Eigen peels unaligned heads off vectorised reductions, so
/// a fixed base alignment keeps summation order independent of the allocator.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

/// Dense row-major tensor of doubles.
///
/// Rank 0 is a scalar, rank 1 a vector, rank 2 a matrix. The automatic
/// differentiation layer treats rank-1 tensors of length n as n x 1 columns
/// when a matrix view is requested.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Tensor from_eigen(const Eigen::Ref<const RowMatrix>& m);
  static Tensor from_vector(const Eigen::Ref<const Eigen::VectorXd>& v);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Leading dimension (1 for scalars).
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  /// Trailing dimension of a matrix (1 for vectors and scalars).
  std::size_t cols() const { return shape_.size() >= 2 ? shape_[1] : 1; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  Buffer& storage() { return data_; }
  const Buffer& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Value of a one-element tensor.
  double item() const;

  MatrixMap mat() { return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())}; }
  ConstMatrixMap mat() const {
    return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }
  Eigen::VectorXd to_vector() const;

  /// Row r of a matrix as a fresh vector.
  Eigen::VectorXd row(std::size_t r) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  void fill(double v);

  std::string shape_string() const;

 private:
  std::vector<std::size_t> shape_;
  Buffer data_;
};

/// Throws DimensionError unless a and b share a shape.
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

/// Plain (non-differentiable) matrix product.
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace bilbo
