#pragma once

#include "retinet/error.hpp"

#include <Eigen/Core>

#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace retinet::nn {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major tensor. Activations are NCHW; parameters use whatever
/// rank their layer needs (conv weight [out, in, kh, kw], dense [in, out]).
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), values_(Array::Constant(element_count(shape_), fill)) {
    for (Index d : shape_)
      if (d < 0) throw ConfigError("negative tensor dimension");
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return values_.size(); }

  Array& values() { return values_; }
  const Array& values() const { return values_; }
  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }
  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  // NCHW accessors (rank 4 only).
  Index batch() const { return shape_[0]; }
  Index channels() const { return shape_[1]; }
  Index height() const { return shape_[2]; }
  Index width() const { return shape_[3]; }
  Index sample_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : size() / shape_[0]; }
  Scalar& operator()(Index n, Index c, Index y, Index x) {
    return values_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  Scalar operator()(Index n, Index c, Index y, Index x) const {
    return values_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  /// Sample n of an NCHW tensor as a channels x (height*width) matrix.
  Eigen::Map<RowMatrix<Scalar>> sample(Index n) {
    return {data() + n * sample_size(), shape_[1], shape_[2] * shape_[3]};
  }
  Eigen::Map<const RowMatrix<Scalar>> sample(Index n) const {
    return {data() + n * sample_size(), shape_[1], shape_[2] * shape_[3]};
  }
  /// Whole tensor as batch x (everything else).
  Eigen::Map<const RowMatrix<Scalar>> rows() const { return {data(), shape_[0], sample_size()}; }
  Eigen::Map<RowMatrix<Scalar>> rows() { return {data(), shape_[0], sample_size()}; }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != size()) throw ConfigError("reshape changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> t(shape_);
    t.values() = values_.template cast<T>();
    return t;
  }

  bool all_finite() const { return values_.allFinite(); }
  void set_zero() { values_.setZero(); }

  /// Same shape and bitwise-equal values.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.values_ == b.values_).all();
  }

 private:
  Shape shape_;
  Array values_;
};

}  // namespace retinet::nn
