#pragma once

#include <cstdint>
#include <initializer_list>

namespace phasemap {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Small deterministic generator used everywhere randomness appears.
/// Platform-independent: identical seeds give identical streams on any host,
/// which is what makes stored states and sweep outputs reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  /// Uniform in [0, 1).
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [-1, 1).
  double uniform_pm1() { return 2.0 * uniform01() - 1.0; }

 private:
  std::uint64_t state_;
};

/// Order-dependent mix of several words into one seed.
inline std::uint64_t seed_hash(std::initializer_list<std::uint64_t> words) {
  std::uint64_t state = 0x8BADF00D5EEDC0DEULL;
  for (std::uint64_t w : words) {
    state ^= w + 0x9E3779B97F4A7C15ULL + (state << 6) + (state >> 2);
    (void)splitmix64_next(state);
  }
  return splitmix64_next(state);
}

/// Bit pattern of a double, for hashing coupling values into seeds.
inline std::uint64_t double_bits(double x) {
  union {
    double d;
    std::uint64_t u;
  } conv;
  conv.d = x;
  return conv.u;
}

}  // namespace phasemap
