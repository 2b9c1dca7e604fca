#pragma once

#include <cstddef>
#include <vector>

#include "vesca/encoder.hpp"
#include "vesca/rng.hpp"
#include "vesca/tensor.hpp"

namespace vesca {

struct SynthParams {
  std::size_t image_side = 32;
  std::size_t patch_side = 4;
  std::size_t num_source = 128;  // source-domain pool (reference draws come from here)
  std::size_t num_train = 128;   // target-domain training split
  std::size_t num_test = 64;     // target-domain images to attack
};

// Source domain: colored shapes on textured backgrounds. Target domain: the
// same shape generator on a distinct stream, passed through a fixed global
// color transform and stripe texture. Labels mark tokens whose patch is at
// least half covered by a shape.
struct Dataset {
  SynthParams params;
  LabeledImages source;
  LabeledImages train;
  LabeledImages test;
};

Dataset synth_dataset(const SynthParams& params, const Rng& rng);

// Pixel quantization used by the generator: nearest multiple of 1/255,
// stored as the nearest 32-bit float.
double quantize_pixel(double v);

}  // namespace vesca
