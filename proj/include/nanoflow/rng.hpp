#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace nf {

// Counter-based generator: draw i of a stream is splitmix64(seed + (i+1)*gamma),
// so every stream is a documented pure function of (seed, position). Uniforms
// take the top 53 bits; each normal consumes two uniforms (Box-Muller, cosine
// branch only).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t next_u64() {
    ++counter_;
    std::uint64_t z = seed_ + counter_ * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // [0, n)
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Independent stream keyed off this generator's seed.
  Rng fork(std::uint64_t stream) const { return Rng(seed_ ^ (0xD1B54A32D192ED03ull * (stream + 1))); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace nf
