#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace fedgen {

// Seeded random stream. mt19937_64 output is fully specified by the
// standard, and every draw below is derived from raw 64-bit outputs only,
// so a given seed produces the same stream everywhere. The std::*
// distribution adaptors are implementation-defined and must not be used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
  }

  // Box-Muller, cosine branch only; one pair of uniforms per draw.
  double normal(double mean, double stddev);

  // Uniform integer in [0, n); n must be positive.
  std::size_t index(std::size_t n);

  // Fisher-Yates. std::shuffle leaves the permutation algorithm
  // unspecified, so it is rolled out by hand.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Mixes a base seed with up to three stream labels so that independent
// consumers (clients, rounds, epochs, pairs) get decorrelated streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                          std::uint64_t b = 0, std::uint64_t c = 0);

}  // namespace fedgen
