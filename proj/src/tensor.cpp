// SPDX-License-Identifier: Apache-2.0
#include "foldkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "foldkit/error.hpp"
#include "foldkit/kernels.hpp"

namespace foldkit {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  if (values.size() != element_count(shape)) {
    fail(ErrorKind::Shape, "tensor of shape " + shape_string(shape) + " given " +
                               std::to_string(values.size()) + " values");
  }
}

bool Tensor::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    fail(ErrorKind::Shape, "matrix " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                               " given " + std::to_string(data_.size()) + " values");
  }
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix Matrix::hcat(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) fail(ErrorKind::Shape, "hcat: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      std::copy(p.row(r).begin(), p.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(c0));
      c0 += p.cols();
    }
  }
  return out;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  return kernels::squared_distance(a.data(), b.data(), a.size());
}

double dot(std::span<const double> a, std::span<const double> b) {
  return kernels::dot(a.data(), b.data(), a.size());
}

}  // namespace foldkit
