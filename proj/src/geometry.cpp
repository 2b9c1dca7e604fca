#include "vesca/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "vesca/errors.hpp"
#include "vesca/numerics.hpp"

namespace vesca {

std::size_t SimplicialComplex::vertex_count() const {
  std::size_t n = 0;
  for (const auto& s : simplices) n += s.size();
  return n;
}

bool is_feasible(const Tensor& image, const Tensor& base, double epsilon,
                 double tolerance) {
  if (image.shape() != base.shape()) return false;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = image[i];
    if (!(v >= 0.0 && v <= 1.0)) return false;
    if (std::abs(v - base[i]) > epsilon + tolerance) return false;
  }
  return true;
}

void validate(const Simplex& s, double tolerance) {
  if (s.vertices.empty()) throw ParameterError("simplex has no vertices");
  if (!(s.epsilon >= 0.0 && s.epsilon <= 1.0)) {
    throw ParameterError("simplex epsilon outside [0, 1]");
  }
  for (std::size_t m = 0; m < s.vertices.size(); ++m) {
    require_same_shape(s.vertices[m], s.base_image, "simplex vertex");
    if (!is_feasible(s.vertices[m], s.base_image, s.epsilon, tolerance)) {
      throw ParameterError("simplex vertex " + std::to_string(m) +
                           " leaves the epsilon-ball or pixel range");
    }
  }
}

void validate(const SimplicialComplex& k, double tolerance) {
  if (k.simplices.empty()) throw ParameterError("complex has no simplices");
  const auto& first = k.simplices.front();
  for (const auto& s : k.simplices) {
    if (s.base_image.shape() != first.base_image.shape() ||
        s.epsilon != first.epsilon) {
      throw ParameterError("complex simplices disagree on base image or epsilon");
    }
    validate(s, tolerance);
  }
}

namespace {

void check_vertex_set(std::span<const Tensor> vertices, const char* where) {
  if (vertices.size() < 3) {
    throw DimensionError(std::string(where) + ": need at least 3 vertices, got " +
                         std::to_string(vertices.size()));
  }
  if (vertices.size() > kMaxCmVertices) {
    throw DimensionError(std::string(where) + ": at most " +
                         std::to_string(kMaxCmVertices) + " vertices supported");
  }
  for (const auto& v : vertices) require_same_shape(v, vertices.front(), where);
}

double sq_distance(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Bordered distance matrix: row/column 0 is (0, 1, ..., 1); entry (i+1, j+1)
// is |x_i - x_j|^2.
Matrix cayley_menger_matrix(std::span<const Tensor> vertices) {
  const std::size_t m = vertices.size();
  Matrix cm(m + 1, m + 1);
  for (std::size_t i = 1; i <= m; ++i) {
    cm(0, i) = 1.0;
    cm(i, 0) = 1.0;
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      const double d = sq_distance(vertices[i], vertices[j]);
      cm(i + 1, j + 1) = d;
      cm(j + 1, i + 1) = d;
    }
  }
  return cm;
}

// (-1)^M / (((M-1)!)^2 2^(M-1))
double cm_coefficient(std::size_t m) {
  double fact = 1.0;
  for (std::size_t i = 2; i < m; ++i) fact *= static_cast<double>(i);
  const double sign = (m % 2 == 0) ? 1.0 : -1.0;
  return sign / (fact * fact * std::ldexp(1.0, static_cast<int>(m - 1)));
}

CmReport report_from_matrix(const Matrix& cm, std::size_t m) {
  CmReport r;
  r.dimension = m - 1;
  r.cm_determinant = determinant(cm);
  r.volume_sq = cm_coefficient(m) * r.cm_determinant;
  r.volume = r.volume_sq > 0.0 ? std::sqrt(r.volume_sq) : 0.0;
  double edge = 0.0;
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = i + 1; j <= m; ++j) edge = std::max(edge, cm(i, j));
  }
  double fact = 1.0;
  for (std::size_t i = 2; i < m; ++i) fact *= static_cast<double>(i);
  r.scale_sq = std::pow(edge, static_cast<double>(m - 1)) / (fact * fact);
  r.degenerate = !(r.volume_sq > kVolumeFloor) ||
                 !(r.volume_sq > kRelativeVolumeFloor * r.scale_sq);
  return r;
}

}  // namespace

CmReport cm_volume(std::span<const Tensor> vertices) {
  check_vertex_set(vertices, "cm_volume");
  return report_from_matrix(cayley_menger_matrix(vertices), vertices.size());
}

double gram_volume(std::span<const Tensor> vertices) {
  if (vertices.size() < 2) throw DimensionError("gram_volume: need at least 2 vertices");
  for (const auto& v : vertices) require_same_shape(v, vertices.front(), "gram_volume");
  const std::size_t k = vertices.size() - 1;
  const Tensor& x0 = vertices.front();
  Matrix g(k, k);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a; b < k; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < x0.size(); ++i) {
        s += (vertices[a + 1][i] - x0[i]) * (vertices[b + 1][i] - x0[i]);
      }
      g(a, b) = s;
      g(b, a) = s;
    }
  }
  double fact = 1.0;
  for (std::size_t i = 2; i <= k; ++i) fact *= static_cast<double>(i);
  const double det = determinant(g);
  return det > 0.0 ? std::sqrt(det) / fact : 0.0;
}

Tensor log_volume_grad(std::span<const Tensor> vertices, std::size_t free_index) {
  check_vertex_set(vertices, "log_volume_grad");
  if (free_index >= vertices.size()) {
    throw ParameterError("log_volume_grad: free vertex index out of range");
  }
  const Matrix cm = cayley_menger_matrix(vertices);
  const CmReport r = report_from_matrix(cm, vertices.size());
  if (r.degenerate) {
    std::ostringstream msg;
    msg << "log_volume_grad: squared volume " << r.volume_sq << " is below the floor";
    throw DegenerateSimplexError(msg.str());
  }
  // log V = (1/2) log(c det CM). d log det / d CM = CM^-T, and each squared
  // distance d_fj occupies two symmetric entries, so d log V / d d_fj equals
  // (CM^-1)_(f+1, j+1).
  const Matrix inv = inverse(cm);
  const Tensor& xf = vertices[free_index];
  Tensor grad(xf.shape());
  for (std::size_t j = 0; j < vertices.size(); ++j) {
    if (j == free_index) continue;
    const double w = 2.0 * inv(free_index + 1, j + 1);
    const Tensor& xj = vertices[j];
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += w * (xf[i] - xj[i]);
  }
  return grad;
}

Tensor centroid(std::span<const Tensor> vertices) {
  if (vertices.empty()) throw ParameterError("centroid: empty vertex list");
  Tensor out(vertices.front().shape());
  for (const auto& v : vertices) {
    require_same_shape(v, vertices.front(), "centroid");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  const double n = static_cast<double>(vertices.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= n;
  return out;
}

Tensor barycentric(std::span<const Tensor> vertices, std::span<const double> weights) {
  if (vertices.empty()) throw ParameterError("barycentric: empty vertex list");
  if (weights.size() != vertices.size()) {
    throw ShapeError("barycentric: weight count does not match vertex count");
  }
  if (vertices.size() == 1) return vertices.front();
  Tensor out(vertices.front().shape());
  for (std::size_t m = 0; m < vertices.size(); ++m) {
    require_same_shape(vertices[m], vertices.front(), "barycentric");
    const double w = weights[m];
    const Tensor& v = vertices[m];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * v[i];
  }
  // A convex combination of in-range pixels is in range; this only absorbs
  // last-ulp rounding.
  for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Tensor sample_point(const Simplex& s, Rng& rng) {
  if (s.vertices.empty()) throw ParameterError("sample_point: empty simplex");
  const Vector w = dirichlet_uniform(s.vertices.size(), rng);
  Tensor out = barycentric(s.vertices, w);
  if (out.shape() == s.base_image.shape()) {
    // Same rounding argument as the pixel range, for the projection box.
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double b = s.base_image[i];
      out[i] = std::clamp(out[i], std::max(b - s.epsilon, 0.0), std::min(b + s.epsilon, 1.0));
    }
  }
  return out;
}

std::vector<Tensor> sample_complex(const SimplicialComplex& k, Rng& rng,
                                   std::size_t count) {
  if (count == 0) throw ParameterError("sample_complex: count must be positive");
  if (k.simplices.empty()) throw ParameterError("sample_complex: empty complex");
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    const auto n = rng.uniform_index(k.simplices.size());
    out.push_back(sample_point(k.simplices[n], rng));
  }
  return out;
}

}  // namespace vesca
