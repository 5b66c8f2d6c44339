#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace msn {

// Counter-based generator: the whole state is (seed, counter), so streams are
// trivially serializable and child streams can be keyed by tuples such as
// (seed, step, image, view) without sharing mutable state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller without a cached second variate, keeping the state to (seed, counter).
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Normal truncated to [mean - 2 stddev, mean + 2 stddev] by rejection.
  double truncated_normal(double stddev) {
    for (;;) {
      const double x = normal();
      if (std::fabs(x) <= 2.0) return x * stddev;
    }
  }

  // Independent stream keyed by this generator's seed and the given keys.
  Rng derive(std::initializer_list<std::uint64_t> keys) const {
    std::uint64_t h = mix(seed_ ^ 0xD1B54A32D192ED03ULL);
    for (std::uint64_t k : keys) h = mix(h ^ (k + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2)));
    return Rng(h);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace msn
