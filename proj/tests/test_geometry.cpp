#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "test_support.hpp"
#include "vesca/errors.hpp"
#include "vesca/geometry.hpp"

namespace vesca {
namespace {

using testing::gram_volume_oracle;
using testing::random_points;
using testing::relative_error;

TEST(CmVolume, MatchesGramOracleOnRandomSimplices) {
  Rng rng(100);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 3 + rng.uniform_index(3);
    const std::size_t dim = m - 1 + rng.uniform_index(18 - m);
    const auto v = random_points(m, dim, rng);
    const double expected = gram_volume_oracle(v);
    EXPECT_LT(relative_error(cm_volume(v).volume, expected), 1e-8)
        << "M=" << m << " dim=" << dim << " trial " << trial;
    EXPECT_LT(relative_error(gram_volume(v), expected), 1e-8);
  }
}

TEST(CmVolume, UnitRightTriangle) {
  const std::vector<Tensor> v{Tensor({2}, {0.0, 0.0}), Tensor({2}, {1.0, 0.0}),
                              Tensor({2}, {0.0, 1.0})};
  const CmReport r = cm_volume(v);
  EXPECT_NEAR(r.volume, 0.5, 1e-12);
  EXPECT_EQ(r.dimension, 2u);
}

TEST(CmVolume, UnitCornerTetrahedron) {
  const std::vector<Tensor> v{Tensor({3}, {0.0, 0.0, 0.0}), Tensor({3}, {1.0, 0.0, 0.0}),
                              Tensor({3}, {0.0, 1.0, 0.0}), Tensor({3}, {0.0, 0.0, 1.0})};
  EXPECT_NEAR(cm_volume(v).volume, 1.0 / 6.0, 1e-12);
}

TEST(CmVolume, RegularSimplexClosedForm) {
  // Regular n-simplex with unit edges: V = sqrt(n + 1) / (n! 2^(n/2)).
  // Vertices e_i / sqrt(2) in R^(n+1) have pairwise distance 1.
  for (std::size_t n = 2; n <= 8; ++n) {
    std::vector<Tensor> v;
    for (std::size_t i = 0; i <= n; ++i) {
      Tensor t({n + 1});
      t[i] = 1.0 / std::sqrt(2.0);
      v.push_back(std::move(t));
    }
    double fact = 1.0;
    for (std::size_t i = 2; i <= n; ++i) fact *= static_cast<double>(i);
    const double expected =
        std::sqrt(static_cast<double>(n + 1)) / (fact * std::pow(2.0, n / 2.0));
    EXPECT_LT(relative_error(cm_volume(v).volume, expected), 1e-10) << "n=" << n;
  }
}

TEST(CmVolume, CollinearIsZero) {
  const std::vector<Tensor> v{Tensor({2}, {0.0, 0.0}), Tensor({2}, {1.0, 1.0}),
                              Tensor({2}, {2.0, 2.0})};
  EXPECT_EQ(cm_volume(v).volume, 0.0);
  EXPECT_TRUE(cm_volume(v).degenerate);
}

TEST(CmVolume, RoundingNoiseOnAFlatSimplexIsDegenerate) {
  // The midpoint of two high-dimensional points is collinear with them, but
  // the computed V^2 is rounding noise well above the absolute floor.
  Rng rng(4);
  auto v = random_points(2, 3072, rng);
  Tensor mid(v[0].shape());
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i] = 0.5 * (v[0][i] + v[1][i]);
  v.push_back(mid);
  const CmReport r = cm_volume(v);
  EXPECT_TRUE(r.degenerate);
  EXPECT_LT(r.volume_sq, kRelativeVolumeFloor * r.scale_sq);
  EXPECT_THROW(log_volume_grad(v, 2), DegenerateSimplexError);
  v[2][0] += 0.01;
  EXPECT_FALSE(cm_volume(v).degenerate);
  EXPECT_NO_THROW(log_volume_grad(v, 2));
}

TEST(CmVolume, DuplicateVertexIsZero) {
  Rng rng(3);
  auto v = random_points(4, 6, rng);
  v[3] = v[1];
  EXPECT_EQ(cm_volume(v).volume, 0.0);
}

TEST(CmVolume, InvariantUnderRigidMotionAndRelabeling) {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t m = 3 + rng.uniform_index(3);
    auto v = random_points(m, 5, rng);
    const double base = cm_volume(v).volume;
    // Translation.
    Tensor shift = testing::random_tensor({5}, rng, -3.0, 3.0);
    auto moved = v;
    for (auto& t : moved) {
      for (std::size_t i = 0; i < 5; ++i) t[i] += shift[i];
    }
    EXPECT_LT(relative_error(cm_volume(moved).volume, base), 1e-9);
    // Coordinate permutation is an isometry.
    auto swapped = v;
    for (auto& t : swapped) std::swap(t[0], t[3]);
    EXPECT_LT(relative_error(cm_volume(swapped).volume, base), 1e-9);
    // Vertex order does not matter.
    auto relabeled = v;
    std::reverse(relabeled.begin(), relabeled.end());
    EXPECT_LT(relative_error(cm_volume(relabeled).volume, base), 1e-9);
  }
}

TEST(CmVolume, ScalesWithDimensionPower) {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t m = 3 + rng.uniform_index(3);
    auto v = random_points(m, 6, rng);
    const double s = rng.uniform(0.2, 3.0);
    auto scaled = v;
    for (auto& t : scaled) {
      for (double& x : t.values()) x *= s;
    }
    const double expected = std::pow(s, static_cast<double>(m - 1)) * cm_volume(v).volume;
    EXPECT_LT(relative_error(cm_volume(scaled).volume, expected), 1e-9);
  }
}

TEST(CmVolume, VertexCountLimits) {
  Rng rng(1);
  EXPECT_THROW(cm_volume(random_points(2, 3, rng)), DimensionError);
  EXPECT_THROW(cm_volume(random_points(kMaxCmVertices + 1, 20, rng)), DimensionError);
  EXPECT_NO_THROW(cm_volume(random_points(kMaxCmVertices, 20, rng)));
  std::vector<Tensor> mixed = random_points(3, 3, rng);
  mixed[1] = Tensor({4});
  EXPECT_THROW(cm_volume(mixed), ShapeError);
}

TEST(LogVolumeGrad, MatchesCentralDifferences) {
  Rng rng(200);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 3 + rng.uniform_index(3);
    const std::size_t dim = m - 1 + rng.uniform_index(18 - m);
    auto v = random_points(m, dim, rng);
    const std::size_t f = rng.uniform_index(m);
    const Tensor g = log_volume_grad(v, f);
    const double h = 1e-6;
    for (std::size_t i = 0; i < dim; ++i) {
      const double x0 = v[f][i];
      v[f][i] = x0 + h;
      const double up = std::log(gram_volume_oracle(v));
      v[f][i] = x0 - h;
      const double down = std::log(gram_volume_oracle(v));
      v[f][i] = x0;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(g[i]), std::abs(numeric), 1e-6});
      EXPECT_LT(std::abs(g[i] - numeric) / denom, 1e-4)
          << "trial " << trial << " M=" << m << " coord " << i;
    }
  }
}

TEST(LogVolumeGrad, ScaleInvarianceMeansZeroRadialComponent) {
  // Scaling every vertex about the centroid by s multiplies V by s^(M-1), so
  // sum_f <grad_f, x_f - c> = M - 1.
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 3 + rng.uniform_index(3);
    const auto v = random_points(m, 7, rng);
    const Tensor c = centroid(v);
    double total = 0.0;
    for (std::size_t f = 0; f < m; ++f) {
      const Tensor g = log_volume_grad(v, f);
      for (std::size_t i = 0; i < 7; ++i) total += g[i] * (v[f][i] - c[i]);
    }
    EXPECT_NEAR(total, static_cast<double>(m - 1), 1e-8);
  }
}

TEST(LogVolumeGrad, DegenerateThrows) {
  const std::vector<Tensor> v{Tensor({2}, {0.0, 0.0}), Tensor({2}, {1.0, 1.0}),
                              Tensor({2}, {2.0, 2.0})};
  EXPECT_THROW(log_volume_grad(v, 0), DegenerateSimplexError);
  Rng rng(2);
  EXPECT_THROW(log_volume_grad(random_points(3, 3, rng), 3), ParameterError);
}

TEST(CmVolume, ReportReproducesDeterminantRelation) {
  // V^2 = (-1)^M / ((M-1)!^2 2^(M-1)) * det(CM).
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 3 + rng.uniform_index(3);
    const CmReport r = cm_volume(random_points(m, 8, rng));
    double fact = 1.0;
    for (std::size_t i = 2; i < m; ++i) fact *= static_cast<double>(i);
    const double sign = m % 2 ? -1.0 : 1.0;
    const double v2 = sign * r.cm_determinant / (fact * fact * std::pow(2.0, m - 1.0));
    EXPECT_LT(relative_error(r.volume * r.volume, v2), 1e-10);
    EXPECT_EQ(r.dimension, m - 1);
  }
}

TEST(LogVolumeGrad, EquilateralTrianglePointsAwayFromOppositeEdge) {
  const double h = std::sqrt(3.0) / 2.0;
  const std::vector<Tensor> v{Tensor({2}, {0.0, 0.0}), Tensor({2}, {1.0, 0.0}),
                              Tensor({2}, {0.5, h})};
  const Tensor g = log_volume_grad(v, 2);
  // Inward direction from the apex is -y; logV = log(base * height / 2).
  EXPECT_LT(g[1] * -1.0, 0.0);
  EXPECT_NEAR(g[0], 0.0, 1e-12);
  EXPECT_NEAR(g[1], 1.0 / h, 1e-10);
}

TEST(LogVolumeGrad, ScalesInverselyWithVertexScale) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 3 + rng.uniform_index(3);
    const auto v = random_points(m, 6, rng);
    const double c = rng.uniform(0.3, 4.0);
    auto scaled = v;
    for (auto& t : scaled) {
      for (double& x : t.values()) x *= c;
    }
    const std::size_t f = rng.uniform_index(m);
    const Tensor g = log_volume_grad(v, f), gs = log_volume_grad(scaled, f);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(gs[i], g[i] / c, 1e-9 * (1.0 + std::abs(g[i])));
  }
}

TEST(Centroid, ClosedFormsAndErrors) {
  const std::vector<Tensor> pair{Tensor({3}, 0.0), Tensor({3}, 1.0)};
  EXPECT_EQ(centroid(pair), Tensor({3}, 0.5));
  EXPECT_THROW(centroid(std::vector<Tensor>{}), ParameterError);
}

Simplex ball_simplex(std::size_t m, double eps, Rng& rng) {
  Simplex s;
  s.base_image = testing::random_tensor({4, 4, 3}, rng);
  s.epsilon = eps;
  for (std::size_t i = 0; i < m; ++i) {
    Tensor v = s.base_image;
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = std::clamp(v[j] + rng.uniform(-eps, eps), 0.0, 1.0);
    }
    s.vertices.push_back(std::move(v));
  }
  return s;
}

TEST(Sampling, PointsStayFeasible) {
  Rng rng(50);
  for (int trial = 0; trial < 20; ++trial) {
    const Simplex s = ball_simplex(1 + rng.uniform_index(5), 0.05, rng);
    for (int k = 0; k < 20; ++k) {
      EXPECT_TRUE(is_feasible(sample_point(s, rng), s.base_image, s.epsilon));
    }
  }
}

TEST(Sampling, SingleVertexReturnsItExactly) {
  Rng rng(51);
  const Simplex s = ball_simplex(1, 0.05, rng);
  EXPECT_EQ(sample_point(s, rng), s.vertices[0]);
  EXPECT_EQ(centroid(s.vertices), s.vertices[0]);
}

TEST(Sampling, BarycentricWeightsSelectVertices) {
  Rng rng(52);
  const Simplex s = ball_simplex(3, 0.05, rng);
  const Tensor p = barycentric(s.vertices, std::vector<double>{0.0, 1.0, 0.0});
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_DOUBLE_EQ(p[i], s.vertices[1][i]);
  EXPECT_THROW(barycentric(s.vertices, std::vector<double>{0.5, 0.5}), ShapeError);
}

TEST(Sampling, CentroidIsMeanOfVertices) {
  Rng rng(53);
  const Simplex s = ball_simplex(4, 0.05, rng);
  const Tensor c = centroid(s.vertices);
  for (std::size_t i = 0; i < c.size(); ++i) {
    double mean = 0.0;
    for (const auto& v : s.vertices) mean += v[i];
    EXPECT_NEAR(c[i], mean / 4.0, 1e-15);
  }
}

TEST(Sampling, ComplexDrawsCoverEverySimplex) {
  Rng rng(54);
  SimplicialComplex k;
  const Simplex first = ball_simplex(1, 0.05, rng);
  for (int n = 0; n < 3; ++n) {
    Simplex s = first;
    Tensor v = first.base_image;
    v[0] = std::clamp(v[0] + 0.01 * (n + 1), 0.0, 1.0);
    s.vertices = {v};
    k.simplices.push_back(s);
  }
  const auto pts = sample_complex(k, rng, 300);
  std::vector<int> hits(3, 0);
  for (const auto& p : pts) {
    for (int n = 0; n < 3; ++n) hits[n] += p == k.simplices[n].vertices[0];
  }
  for (int h : hits) EXPECT_GT(h, 60);
  EXPECT_THROW(sample_complex(k, rng, 0), ParameterError);
}

TEST(Sampling, CentroidIsFeasibleByConvexity) {
  Rng rng(56);
  for (int trial = 0; trial < 20; ++trial) {
    const Simplex s = ball_simplex(2 + rng.uniform_index(4), 0.03, rng);
    EXPECT_TRUE(is_feasible(centroid(s.vertices), s.base_image, s.epsilon));
  }
}

TEST(Sampling, MonteCarloMeanApproachesCentroid) {
  Rng rng(57);
  const Simplex s = ball_simplex(4, 0.05, rng);
  Tensor mean(s.base_image.shape());
  const int n = 10000;
  for (int k = 0; k < n; ++k) {
    const Tensor p = sample_point(s, rng);
    for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i] / n;
  }
  double spread = 0.0;
  for (const auto& a : s.vertices) {
    for (const auto& b : s.vertices) spread = std::max(spread, linf_distance(a, b));
  }
  EXPECT_LE(linf_distance(mean, centroid(s.vertices)), 0.02 * spread);
}

TEST(Sampling, SeededDrawsAreReproducible) {
  Rng setup(58);
  SimplicialComplex k;
  for (int n = 0; n < 3; ++n) k.simplices.push_back(ball_simplex(3, 0.05, setup));
  for (auto& s : k.simplices) s.base_image = k.simplices[0].base_image;
  Rng a(7), b(7);
  EXPECT_EQ(sample_complex(k, a, 25), sample_complex(k, b, 25));
}

TEST(Sampling, SingleSimplexComplexMatchesSamplePoint) {
  Rng setup(59);
  SimplicialComplex k;
  k.simplices.push_back(ball_simplex(4, 0.05, setup));
  Rng a(3), b(3);
  const auto from_complex = sample_complex(k, a, 10);
  // The simplex choice consumes one index draw per sample.
  for (const auto& p : from_complex) {
    b.uniform_index(1);
    EXPECT_EQ(p, sample_point(k.simplices[0], b));
  }
}

TEST(Sampling, ThousandDrawsFromComplexStayFeasible) {
  Rng rng(60);
  SimplicialComplex k;
  const Simplex first = ball_simplex(4, 10.0 / 255.0, rng);
  for (int n = 0; n < 4; ++n) {
    Simplex s = ball_simplex(4, 10.0 / 255.0, rng);
    s.base_image = first.base_image;
    for (auto& v : s.vertices) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = std::clamp(first.base_image[i] + rng.uniform(-s.epsilon, s.epsilon), 0.0, 1.0);
      }
    }
    k.simplices.push_back(s);
  }
  for (const auto& p : sample_complex(k, rng, 1000)) {
    ASSERT_TRUE(is_feasible(p, first.base_image, first.epsilon));
  }
}

TEST(Validate, RejectsInfeasibleVertices) {
  Rng rng(55);
  Simplex s = ball_simplex(3, 0.05, rng);
  EXPECT_NO_THROW(validate(s));
  s.vertices[1][0] = s.base_image[0] + 0.2;
  EXPECT_THROW(validate(s), ParameterError);
  Simplex range = ball_simplex(2, 0.05, rng);
  range.vertices[0][0] = -0.01;
  range.base_image[0] = 0.0;
  EXPECT_THROW(validate(range), ParameterError);
  EXPECT_THROW(validate(SimplicialComplex{}), ParameterError);
}

}  // namespace
}  // namespace vesca
