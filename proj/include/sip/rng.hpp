#pragma once

#include <cstdint>
#include <random>

#include "sip/tensor.hpp"

namespace sip {

/// Seeded random source. Normal variates use an explicit Box-Muller transform
/// so that streams are identical across standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal();

  std::uint64_t integer(std::uint64_t n);  // uniform in [0, n)

  Tensor normal_tensor(Shape shape);
  Tensor uniform_tensor(Shape shape, double lo, double hi);

  std::uint64_t seed() const { return seed_; }

  /// Independent generator for a named substream (split seeds, repetitions).
  Rng fork(std::uint64_t stream) const { return Rng(mix(seed_, stream)); }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sip
