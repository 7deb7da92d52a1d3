#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace flowkrig {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix matrix_power(const Matrix& m, unsigned k);
/// Rows and columns restricted to `idx`, in that order.
Matrix submatrix(const Matrix& m, std::span<const std::size_t> idx);
/// Rows restricted to `idx`; columns kept.
Matrix select_rows(const Matrix& m, std::span<const std::size_t> idx);

/// N x T matrix of 5-minute readings, one row per sensor in network order.
using SeriesMatrix = Matrix;

}  // namespace flowkrig
