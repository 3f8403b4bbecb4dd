#include "micromoe/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace micromoe {

Tensor Tensor::full(std::size_t rows, std::size_t cols, double v) {
  Tensor t(rows, cols);
  for (double& x : t.data_) x = v;
  return t;
}

Tensor Tensor::scalar(double v) { return full(1, 1, v); }

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return Tensor();
  Tensor t(rows.size(), rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != t.cols_)
      throw std::invalid_argument("from_rows: ragged rows");
    for (std::size_t c = 0; c < t.cols_; ++c) t.at(r, c) = rows[r][c];
  }
  return t;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

void Tensor::ensure_grad() {
  if (grad.size() != data_.size()) grad.assign(data_.size(), 0.0);
}

}  // namespace micromoe
