#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vesca/encoder.hpp"
#include "vesca/geometry.hpp"
#include "vesca/rng.hpp"
#include "vesca/tensor.hpp"

namespace vesca {

// How simplices 1..N-1 are seeded from the first vertex.
enum class SeedAugmentation : std::uint8_t {
  par,     // patch shuffle + rotate, then project
  jitter,  // copy of the first vertex plus uniform noise of size epsilon / 100
};

std::string to_string(SeedAugmentation a);
SeedAugmentation parse_seed_augmentation(const std::string& s);

struct AttackConfig {
  double epsilon = 10.0 / 255.0;
  std::optional<double> step_size;  // defaults to epsilon / iterations
  double momentum = 1.0;
  std::size_t iterations = 10;       // refinement steps per vertex
  std::size_t init_iterations = 10;  // steps for the first vertex
  std::size_t num_simplices = 4;
  std::size_t num_vertices = 4;
  std::size_t mc_samples = 4;
  double lambda_star = 0.1;
  std::size_t ns = 8;  // PAR grid side
  LossKind loss = LossKind::l1;
  bool use_dra = true;
  SeedAugmentation augmentation = SeedAugmentation::par;

  double step() const;
  // Throws ConfigError when an invariant is violated. `image_side` is the
  // side of the images the config will be applied to.
  void validate(std::size_t image_side) const;
};

// One optimization step of either stage.
struct TraceRecord {
  std::string stage;  // "init" or "refine"
  std::size_t simplex = 0;
  std::size_t vertex = 0;
  std::size_t iteration = 0;
  double loss = 0.0;    // objective loss term (MC mean for refine)
  double volume = 0.0;  // provisional simplex volume, 0 when undefined
  double lambda = 0.0;  // adaptive lambda, 0 when the volume term is off
  bool degenerate = false;
};

// Clamp to [original - eps, original + eps] intersected with [0, 1].
Tensor project(const Tensor& image, const Tensor& original, double epsilon);

// lambda* / max(V, sqrt(kVolumeFloor)), capped at lambda* * 1e6.
double adaptive_lambda(double lambda_star, double volume);

// First vertex: momentum sign-gradient ascent on
//   L(f(x), f(x_tau)) - [use_dra] l1(f(x), reference_mean)
// starting from a uniform random point within one step of x_tau.
Tensor init_vertex(const Network& encoder, const Tensor& base,
                   const Embedding& clean_embedding, const Embedding* reference_mean,
                   const AttackConfig& cfg, Rng& rng, bool use_dra,
                   std::vector<TraceRecord>* trace = nullptr);

// Patch shuffle-and-rotate with explicit permutation and quarter turns.
// Output cell p holds source cell perm[p] rotated counter-clockwise by
// quarter_turns[p] * 90 degrees.
Tensor par_apply(const Tensor& image, std::size_t ns, std::span<const std::size_t> perm,
                 std::span<const int> quarter_turns);
// Random permutation of the ns x ns grid and a uniform quarter turn per patch.
Tensor par_augment(const Tensor& image, std::size_t ns, Rng& rng);

struct RefineResult {
  Tensor vertex;
  std::vector<double> mc_losses;  // MC loss mean at each iteration, before the step
  bool degenerate_throughout = false;
};

// Adds one vertex to `prefix`: starts at the centroid of the existing
// vertices and runs momentum sign ascent on the H-sample Monte-Carlo loss
// plus lambda log V once the provisional simplex has three or more vertices.
RefineResult refine_vertex(const Network& encoder, const Simplex& prefix,
                           const Embedding& clean_embedding, const AttackConfig& cfg,
                           Rng& rng, std::size_t simplex_index = 0,
                           std::vector<TraceRecord>* trace = nullptr);

struct BuildOptions {
  std::size_t jobs = 1;  // workers for the independent simplices
  std::vector<TraceRecord>* trace = nullptr;
  std::vector<std::string>* warnings = nullptr;
};

// Full pipeline for one clean image. Every simplex draws from its own child
// stream of `rng`, so the result does not depend on `jobs`.
SimplicialComplex build_complex(const Network& encoder, const Tensor& base,
                                const Embedding* reference_mean, const AttackConfig& cfg,
                                const Rng& rng, const BuildOptions& options = {});

std::vector<Tensor> generate_adversarial(const SimplicialComplex& k, Rng& rng,
                                         std::size_t count);

}  // namespace vesca
