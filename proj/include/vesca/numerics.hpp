#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "vesca/rng.hpp"
#include "vesca/tensor.hpp"

namespace vesca {

// Row-major dense matrix of 64-bit reals.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<const double> values() const noexcept { return data_; }

  Matrix operator*(const Matrix& rhs) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// LU factorization with partial pivoting of a square matrix.
struct LuFactors {
  Matrix lu;
  std::vector<std::size_t> pivots;
  int sign = 1;
  bool singular = false;
};

LuFactors lu_decompose(const Matrix& m);

// Throws ShapeError for non-square input.
double determinant(const Matrix& m);

// Throws NumericError when the matrix is exactly singular.
Matrix inverse(const Matrix& m);

// Dirichlet(alpha) weights. All-ones alpha uses normalized unit exponentials;
// anything else uses Gamma(alpha_i) draws.
Vector dirichlet_sample(std::span<const double> alpha, Rng& rng);
Vector dirichlet_uniform(std::size_t m, Rng& rng);

// Median of the pairwise squared distances over the union of both sets.
double median_sq_distance(std::span<const Vector> x, std::span<const Vector> y);

// Unbiased MMD^2 with kernel exp(-|a-b|^2 / (2 sigma^2)). When `sigma` is
// empty the median heuristic picks sigma^2. Equal-size sets use the paired
// U-statistic (zero for identical sets); otherwise the two-sample form.
double rbf_mmd2(std::span<const Vector> x, std::span<const Vector> y,
                std::optional<double> sigma = std::nullopt);

}  // namespace vesca
