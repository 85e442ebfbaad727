#include "tscan/tensor.hpp"

#include <cmath>

#include "tscan/errors.hpp"

namespace tscan {

Tensor::Tensor(int rows, int cols) : rows_(rows), cols_(cols) {
  if (rows < 0 || cols < 0 || (rows == 0) != (cols == 0))
    throw ShapeError("tensor: invalid shape " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  values_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
}

Tensor Tensor::full(int rows, int cols, double v) {
  Tensor t(rows, cols);
  for (auto& x : t.values_) x = v;
  return t;
}

Tensor Tensor::scalar(double v) { return full(1, 1, v); }

Tensor Tensor::row(std::vector<double> v) {
  Tensor t;
  t.rows_ = 1;
  t.cols_ = static_cast<int>(v.size());
  t.values_ = std::move(v);
  return t;
}

Tensor Tensor::from(int rows, int cols, std::vector<double> v) {
  if (static_cast<std::int64_t>(v.size()) != static_cast<std::int64_t>(rows) * cols)
    throw ShapeError("tensor: " + std::to_string(v.size()) + " values for shape " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  Tensor t;
  t.rows_ = rows;
  t.cols_ = cols;
  t.values_ = std::move(v);
  return t;
}

std::string Tensor::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool Tensor::all_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace tscan
