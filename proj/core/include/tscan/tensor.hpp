#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tscan {

// Dense row-major matrix of 64-bit reals. Rank is at most 2 everywhere in the
// library; scalars are 1x1, row vectors 1xN. Shape is fixed at construction.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols);

  static Tensor zeros(int rows, int cols) { return Tensor(rows, cols); }
  static Tensor full(int rows, int cols, double v);
  static Tensor scalar(double v);
  static Tensor row(std::vector<double> v);
  static Tensor from(int rows, int cols, std::vector<double> v);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::int64_t size() const { return static_cast<std::int64_t>(rows_) * cols_; }
  std::vector<int> shape() const { return {rows_, cols_}; }
  std::string shape_str() const;

  double& at(int r, int c) { return values_[static_cast<std::size_t>(r) * cols_ + c]; }
  double at(int r, int c) const { return values_[static_cast<std::size_t>(r) * cols_ + c]; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool all_finite() const;

  // Whether gradients should be tracked when this tensor enters a tape.
  bool requires_grad = false;

 private:
  int rows_ = 0, cols_ = 0;
  std::vector<double> values_;
};

}  // namespace tscan
