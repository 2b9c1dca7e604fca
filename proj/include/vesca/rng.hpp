#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace vesca {

// SplitMix64 finalizer; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t x);

// Deterministic random stream. Every distribution below is implemented here
// on top of the raw 64-bit engine output, so identical seeds and call
// sequences give bit-identical results on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  // Number of raw 64-bit words consumed so far.
  std::uint64_t position() const noexcept { return position_; }

  std::uint64_t next_u64() {
    ++position_;
    return engine_();
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  // Uniform on (0, 1]; safe as a log argument.
  double uniform_open() { return 1.0 - uniform(); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  double normal();
  // Unit-rate exponential.
  double exponential();
  // Gamma(shape, 1), Marsaglia-Tsang.
  double gamma(double shape);

  // Child stream keyed by the parent seed and a path of indices. Does not
  // advance this stream.
  Rng derive(std::initializer_list<std::uint64_t> path) const;

 private:
  std::uint64_t seed_;
  std::uint64_t position_ = 0;
  std::mt19937_64 engine_;
};

}  // namespace vesca
