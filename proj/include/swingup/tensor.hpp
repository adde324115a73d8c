#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "swingup/common.hpp"

namespace swingup {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

/// Dense row-major float64 tensor of rank 1..3.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(static_cast<std::size_t>(numel_from(shape_)), 0.0);
  }
  Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (static_cast<std::int64_t>(data_.size()) != numel_from(shape_))
      throw ContractError("tensor data size does not match shape");
  }

  static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<double> v) {
    auto n = static_cast<std::int64_t>(v.size());
    return Tensor({1, n}, std::move(v));
  }
  static Tensor vec(std::vector<double> v) {
    auto n = static_cast<std::int64_t>(v.size());
    return Tensor({n}, std::move(v));
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Rank-2 view.
  MapRM mat() {
    require_rank(2);
    return MapRM(data(), dim(0), dim(1));
  }
  CMapRM mat() const {
    require_rank(2);
    return CMapRM(data(), dim(0), dim(1));
  }
  /// Batch b of a rank-3 tensor as a rank-2 view.
  MapRM mat_of(std::int64_t b) {
    require_rank(3);
    return MapRM(data() + b * dim(1) * dim(2), dim(1), dim(2));
  }
  CMapRM mat_of(std::int64_t b) const {
    require_rank(3);
    return CMapRM(data() + b * dim(1) * dim(2), dim(1), dim(2));
  }
  MapVec flat() { return MapVec(data(), numel()); }
  CMapVec flat() const { return CMapVec(data(), numel()); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  static std::int64_t numel_from(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

 private:
  void check_shape() const {
    if (shape_.empty() || shape_.size() > 3)
      throw ContractError("tensor rank must be 1..3, got rank " +
                          std::to_string(shape_.size()));
    for (auto d : shape_)
      if (d <= 0) throw ContractError("tensor dims must be positive, got " + shape_str());
  }
  void require_rank(int r) const {
    if (rank() != r)
      throw ContractError("expected rank-" + std::to_string(r) + " tensor, got " + shape_str());
  }

  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

}  // namespace swingup
