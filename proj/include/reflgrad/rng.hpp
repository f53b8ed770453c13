#pragma once

// Reproducible random numbers.  std::mt19937_64 output is fully specified by
// the standard, but the std distributions are not, so the uniform and normal
// transforms are implemented here.  Independent streams (chains, restarts)
// are derived from a base seed with a splitmix64 mix so they never overlap by
// construction of distinct engine seeds.

#include <cmath>
#include <cstdint>
#include <random>

namespace reflgrad {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class rng {
 public:
  explicit rng(std::uint64_t seed) : eng_(seed) {}

  // Stream `stream` (chain index, restart index, ...) of a base seed.
  static rng stream(std::uint64_t seed, std::uint64_t stream) {
    return rng(splitmix64(seed ^ splitmix64(stream + 1)));
  }

  std::uint64_t bits() { return eng_(); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; caches the second deviate.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection-free enough for non-cryptographic use; keep the
    // simple multiply-shift which is exact for n << 2^64.
    __uint128_t m = static_cast<__uint128_t>(eng_()) * n;
    return static_cast<std::uint64_t>(m >> 64);
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace reflgrad
