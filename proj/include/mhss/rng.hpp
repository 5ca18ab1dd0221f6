#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace mhss {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Deterministic generator with a fixed draw sequence on every platform.
/// Standard-library distributions are implementation-defined, which would
/// break bitwise reproducibility of seeded runs, so the few draws we need
/// are spelled out here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t below(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  // Box-Muller; consumes exactly two draws per call.
  double gauss() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Independent stream derived from this seed; used so e.g. shuffle order
  /// does not depend on how many draws initialization consumed.
  static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
    std::uint64_t s = seed ^ (0xA0761D6478BD642FULL + stream_id * 0xE7037ED1A0B428DBULL);
    return Rng(splitmix64(s));
  }

 private:
  std::uint64_t state_;
};

// Fisher-Yates with our own index draws, for the same determinism reason.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace mhss
