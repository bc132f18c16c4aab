#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

namespace distdnas {

using Index = std::int64_t;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Rank 1..3, row-major. Rank-3 tensors are (batch, slots, features).
struct Shape {
  std::array<Index, 3> dims{0, 0, 0};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<Index> d);

  Index operator[](int axis) const { return dims[static_cast<std::size_t>(axis)]; }
  Index size() const;
  Index last() const { return dims[static_cast<std::size_t>(rank - 1)]; }
  // Product of all dims except the last one.
  Index rows() const { return size() / last(); }
  std::string str() const;

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank != b.rank) return false;
    for (int i = 0; i < a.rank; ++i)
      if (a[i] != b[i]) return false;
    return true;
  }
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// Storage is aligned to Eigen's maximum packet size so that vectorized
// reductions split work identically for every tensor, keeping results
// bitwise reproducible across allocations.
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  Index size() const { return static_cast<Index>(data_.size()); }
  int rank() const { return shape_.rank; }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  double& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }
  double& at(Index i, Index j) { return data_[static_cast<std::size_t>(i * shape_.last() + j)]; }
  double at(Index i, Index j) const { return data_[static_cast<std::size_t>(i * shape_.last() + j)]; }
  double& at(Index b, Index n, Index d) {
    return data_[static_cast<std::size_t>((b * shape_[1] + n) * shape_[2] + d)];
  }
  double at(Index b, Index n, Index d) const {
    return data_[static_cast<std::size_t>((b * shape_[1] + n) * shape_[2] + d)];
  }

  // Views the tensor as a (rows x last-dim) matrix.
  MatMap matrix() { return MatMap(data_.data(), shape_.rows(), shape_.last()); }
  ConstMatMap matrix() const { return ConstMatMap(data_.data(), shape_.rows(), shape_.last()); }

  void fill(double v);
  Tensor reshaped(Shape s) const;
  bool all_finite() const;

 private:
  Shape shape_;
  Storage data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace distdnas
