#include "vesca/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "vesca/errors.hpp"

namespace vesca {

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::operator*(const Matrix& rhs) const {
  if (cols_ != rhs.rows_) throw ShapeError("matrix product: inner dimension mismatch");
  Matrix out(rows_, rhs.cols_);
  for (std::size_t i = 0; i < rows_; ++i) {
    for (std::size_t k = 0; k < cols_; ++k) {
      const double a = (*this)(i, k);
      for (std::size_t j = 0; j < rhs.cols_; ++j) out(i, j) += a * rhs(k, j);
    }
  }
  return out;
}

LuFactors lu_decompose(const Matrix& m) {
  if (!m.square()) {
    throw ShapeError("lu_decompose: matrix is " + std::to_string(m.rows()) +
                     "x" + std::to_string(m.cols()) + ", expected square");
  }
  const std::size_t n = m.rows();
  LuFactors f{m, std::vector<std::size_t>(n), 1, false};
  Matrix& a = f.lu;
  for (std::size_t i = 0; i < n; ++i) f.pivots[i] = i;

  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    double best = std::abs(a(k, k));
    for (std::size_t r = k + 1; r < n; ++r) {
      if (std::abs(a(r, k)) > best) {
        best = std::abs(a(r, k));
        p = r;
      }
    }
    if (best == 0.0) {
      f.singular = true;
      continue;
    }
    if (p != k) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a(k, c), a(p, c));
      std::swap(f.pivots[k], f.pivots[p]);
      f.sign = -f.sign;
    }
    for (std::size_t r = k + 1; r < n; ++r) {
      const double l = a(r, k) / a(k, k);
      a(r, k) = l;
      for (std::size_t c = k + 1; c < n; ++c) a(r, c) -= l * a(k, c);
    }
  }
  return f;
}

double determinant(const Matrix& m) {
  const LuFactors f = lu_decompose(m);
  if (f.singular) return 0.0;
  double det = f.sign;
  for (std::size_t i = 0; i < m.rows(); ++i) det *= f.lu(i, i);
  return det;
}

Matrix inverse(const Matrix& m) {
  const LuFactors f = lu_decompose(m);
  if (f.singular) throw NumericError("inverse: matrix is singular");
  const std::size_t n = m.rows();
  Matrix inv(n, n);
  std::vector<double> col(n);
  for (std::size_t j = 0; j < n; ++j) {
    // Solve A x = e_j with the permuted unit vector.
    for (std::size_t i = 0; i < n; ++i) col[i] = f.pivots[i] == j ? 1.0 : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < i; ++k) col[i] -= f.lu(i, k) * col[k];
    }
    for (std::size_t i = n; i-- > 0;) {
      for (std::size_t k = i + 1; k < n; ++k) col[i] -= f.lu(i, k) * col[k];
      col[i] /= f.lu(i, i);
    }
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
  }
  return inv;
}

Vector dirichlet_sample(std::span<const double> alpha, Rng& rng) {
  if (alpha.empty()) throw ParameterError("dirichlet_sample: empty alpha");
  for (double a : alpha) {
    if (!(a > 0.0) || !std::isfinite(a)) {
      throw ParameterError("dirichlet_sample: alpha entries must be positive");
    }
  }
  const bool uniform = std::all_of(alpha.begin(), alpha.end(),
                                   [](double a) { return a == 1.0; });
  Vector w(alpha.size());
  double total = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    w[i] = uniform ? rng.exponential() : rng.gamma(alpha[i]);
    total += w[i];
  }
  if (!(total > 0.0)) {
    // Every gamma draw underflowed; only possible for tiny alpha.
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
    return w;
  }
  for (double& v : w) v /= total;
  return w;
}

Vector dirichlet_uniform(std::size_t m, Rng& rng) {
  const std::vector<double> ones(m, 1.0);
  return dirichlet_sample(ones, rng);
}

namespace {

double sq_dist(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void check_sets(std::span<const Vector> x, std::span<const Vector> y) {
  if (x.size() < 2 || y.size() < 2) {
    throw ParameterError("rbf_mmd2: each set needs at least two embeddings");
  }
  const std::size_t d = x.front().size();
  for (const auto& v : x) {
    if (v.size() != d) throw ShapeError("rbf_mmd2: embedding dimension mismatch");
  }
  for (const auto& v : y) {
    if (v.size() != d) throw ShapeError("rbf_mmd2: embedding dimension mismatch");
  }
}

}  // namespace

double median_sq_distance(std::span<const Vector> x, std::span<const Vector> y) {
  std::vector<const Vector*> all;
  all.reserve(x.size() + y.size());
  for (const auto& v : x) all.push_back(&v);
  for (const auto& v : y) all.push_back(&v);
  std::vector<double> d;
  d.reserve(all.size() * (all.size() - 1) / 2);
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = i + 1; j < all.size(); ++j) d.push_back(sq_dist(*all[i], *all[j]));
  }
  if (d.empty()) return 0.0;
  std::sort(d.begin(), d.end());
  const std::size_t n = d.size();
  return n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

double rbf_mmd2(std::span<const Vector> x, std::span<const Vector> y,
                std::optional<double> sigma) {
  check_sets(x, y);
  double sigma2;
  if (sigma) {
    if (!(*sigma > 0.0)) throw ParameterError("rbf_mmd2: bandwidth must be positive");
    sigma2 = *sigma * *sigma;
  } else {
    sigma2 = median_sq_distance(x, y);
    // All points coincide: any bandwidth gives the same (zero) statistic.
    if (!(sigma2 > 0.0)) sigma2 = 1.0;
  }
  const double scale = -1.0 / (2.0 * sigma2);
  auto k = [&](const Vector& a, const Vector& b) {
    return std::exp(scale * sq_dist(a, b));
  };

  const double m = static_cast<double>(x.size());
  const double n = static_cast<double>(y.size());
  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) kxx += 2.0 * k(x[i], x[j]);
  }
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (std::size_t j = i + 1; j < y.size(); ++j) kyy += 2.0 * k(y[i], y[j]);
  }
  if (x.size() == y.size()) {
    // Paired U-statistic: cross pairs with i == j are left out, so identical
    // sets give exactly zero.
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t j = 0; j < y.size(); ++j) {
        if (i != j) kxy += k(x[i], y[j]);
      }
    }
    return (kxx + kyy - 2.0 * kxy) / (m * (m - 1.0));
  }
  for (const auto& a : x) {
    for (const auto& b : y) kxy += k(a, b);
  }
  return kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n);
}

}  // namespace vesca
