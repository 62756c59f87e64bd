#include "rng.hpp"

#include <cmath>

#include "common.hpp"

namespace fedgen {

double Rng::normal(double mean, double stddev) {
  // u1 in (0, 1] so the log is finite.
  double u1 = 1.0 - uniform01();
  double u2 = uniform01();
  double z = std::sqrt(-2.0 * std::log(u1)) *
             std::cos(2.0 * 3.14159265358979323846 * u2);
  return mean + stddev * z;
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) {
    fail(ErrorCode::kInvalidArgument, "Rng::index: n must be positive");
  }
  // Lemire multiply-shift; negligible bias for desk-scale n.
  return static_cast<std::size_t>(
      (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                          std::uint64_t b, std::uint64_t c) {
  std::uint64_t s = splitmix64(base);
  s = splitmix64(s ^ a);
  s = splitmix64(s ^ b);
  s = splitmix64(s ^ c);
  return s;
}

}  // namespace fedgen
