#pragma once

#include <cstddef>
#include <vector>

namespace micromoe {

/// Dense row-major matrix of 64-bit floats. A scalar is a 1x1 tensor.
///
/// The optional grad buffer, when present, always has the same shape as the
/// data. All kernels keep values finite; NaN/Inf is treated as an error by
/// the graph layer.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor(rows, cols);
  }
  static Tensor full(std::size_t rows, std::size_t cols, double v);
  static Tensor scalar(double v);
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Tensor& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  /// Row r as a pointer into the flat buffer.
  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }

  bool all_finite() const;

  // Gradient buffer; empty means "no gradient yet".
  bool has_grad() const { return !grad.empty(); }
  void ensure_grad();
  void zero_grad() { grad.clear(); }

  bool requires_grad = false;
  std::vector<double> grad;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

}  // namespace micromoe
