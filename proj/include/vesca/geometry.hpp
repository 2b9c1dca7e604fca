#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vesca/rng.hpp"
#include "vesca/tensor.hpp"

namespace vesca {

// Squared-volume threshold below which a simplex is treated as degenerate:
// log V is clamped and its gradient is zero.
inline constexpr double kVolumeFloor = 1e-30;
// A simplex is also treated as degenerate when V^2 falls below this fraction
// of the squared volume scale set by its longest edge, which catches
// flat simplices whose volume is pure rounding noise.
inline constexpr double kRelativeVolumeFloor = 1e-12;
// Largest supported vertex count for Cayley-Menger computations.
inline constexpr std::size_t kMaxCmVertices = 15;

// Vertices are full images; every vertex lies in the l-infinity ball of
// radius `epsilon` around `base_image`, intersected with [0, 1].
struct Simplex {
  Tensor base_image;
  std::vector<Tensor> vertices;
  double epsilon = 0.0;

  std::size_t size() const noexcept { return vertices.size(); }

  friend bool operator==(const Simplex&, const Simplex&) = default;
};

struct SimplicialComplex {
  std::vector<Simplex> simplices;

  std::size_t size() const noexcept { return simplices.size(); }
  std::size_t vertex_count() const;

  friend bool operator==(const SimplicialComplex&, const SimplicialComplex&) = default;
};

// Throws ParameterError/ShapeError when the feasibility invariants fail.
void validate(const Simplex& s, double tolerance = 1e-9);
void validate(const SimplicialComplex& k, double tolerance = 1e-9);
bool is_feasible(const Tensor& image, const Tensor& base, double epsilon,
                 double tolerance = 1e-9);

struct CmReport {
  double volume = 0.0;
  double volume_sq = 0.0;       // signed, before clamping
  double cm_determinant = 0.0;
  std::size_t dimension = 0;    // M - 1
  double scale_sq = 0.0;        // (max edge^2)^(M-1) / ((M-1)!)^2
  bool degenerate = true;       // V^2 under the absolute or relative floor
};

// Volume from the Cayley-Menger determinant,
//   V^2 = (-1)^M / (((M-1)!)^2 2^(M-1)) * det(CM),
// for M >= 3 vertices. Negative V^2 from roundoff clamps to V = 0.
CmReport cm_volume(std::span<const Tensor> vertices);
inline CmReport cm_volume(const Simplex& s) { return cm_volume(s.vertices); }

// Volume from the Gram determinant of the edge vectors x_i - x_0,
//   V = sqrt(det(E E^T)) / (M-1)!,
// for M >= 2 vertices. An independent check on cm_volume.
double gram_volume(std::span<const Tensor> vertices);

// Gradient of log V with respect to vertex `free_index`. Throws
// DegenerateSimplexError when V^2 <= kVolumeFloor.
Tensor log_volume_grad(std::span<const Tensor> vertices, std::size_t free_index);
inline Tensor log_volume_grad(const Simplex& s, std::size_t free_index) {
  return log_volume_grad(s.vertices, free_index);
}

Tensor centroid(std::span<const Tensor> vertices);

// Convex combination of the vertices with weights drawn from Dirichlet(1).
Tensor barycentric(std::span<const Tensor> vertices, std::span<const double> weights);
Tensor sample_point(const Simplex& s, Rng& rng);
// Picks a simplex uniformly, then samples inside it.
std::vector<Tensor> sample_complex(const SimplicialComplex& k, Rng& rng,
                                   std::size_t count);

}  // namespace vesca
