#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "vecroute/errors.hpp"

namespace vecroute::nn {

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor. Gradients live next to values in Param / graph
// nodes rather than inside the tensor itself.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (int d : shape_) {
      if (d <= 0) throw DimensionError("tensor dimension must be positive, got " + shape_str(shape_));
      n *= static_cast<std::size_t>(d);
    }
    data_.assign(n, S(0));
  }

  Tensor(std::vector<int> shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    std::size_t n = 1;
    for (int d : shape_) n *= static_cast<std::size_t>(d);
    if (n != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor row(std::vector<S> values) {
    int n = static_cast<int>(values.size());
    return Tensor({1, n}, std::move(values));
  }

  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }

  // 2D accessors; rank-1 tensors behave as a single row.
  int rows() const { return rank() == 2 ? dim(0) : 1; }
  int cols() const { return rank() == 2 ? dim(1) : (rank() == 1 ? dim(0) : 0); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  S at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  S& operator[](std::size_t i) { return data_[i]; }
  S operator[](std::size_t i) const { return data_[i]; }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.reset(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  void reset(const std::vector<int>& shape) {
    shape_ = shape;
    std::size_t n = 1;
    for (int d : shape_) n *= static_cast<std::size_t>(d);
    data_.assign(n, S(0));
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  std::vector<int> shape_;
  std::vector<S> data_;
};

}  // namespace vecroute::nn
