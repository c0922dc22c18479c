#ifndef DPALAB_RNG_HPP
#define DPALAB_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dpalab {

// SplitMix64 (Steele, Lea, Flood 2014). The whole library draws randomness
// from this generator so that streams are reproducible in any language:
//
//   state += 0x9E3779B97F4A7C15
//   z = state
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   return z ^ (z >> 31)
//
// uniform()  = (next() >> 11) * 2^-53                       in [0, 1)
// normal()   = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)           (one value per pair)
// below(n)   = next() % n
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(1.0 - u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next() % n; }

  // Independent child stream; used to give each component its own sequence.
  SplitMix64 fork(std::uint64_t salt) {
    return SplitMix64(next() ^ (salt * 0xD1B54A32D192ED03ULL));
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace dpalab

#endif  // DPALAB_RNG_HPP
