#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

namespace gau {

// SplitMix64 finalizer. Used both to expand seeds and as the counter-based
// hash behind dropout masks.
constexpr uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Combine a base key with a stream identifier into a new independent key.
constexpr uint64_t derive_key(uint64_t key, uint64_t stream) {
  return mix64(key ^ mix64(stream + 0x632BE59BD9B4E019ULL));
}

// Maps 64 random bits to a double in [0, 1).
inline double unit_double(uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// xoshiro256** with an explicit 64-bit seed. Satisfies
// UniformRandomBitGenerator, but every distribution used by the library is
// implemented here so streams are identical across standard libraries.
class Rng {
 public:
  using result_type = uint64_t;

  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  // Generator keyed by (seed, a, b); e.g. (seed, step) for masking.
  static Rng keyed(uint64_t seed, uint64_t a, uint64_t b = 0) {
    return Rng(derive_key(derive_key(seed, a), b));
  }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : state_) {
      x += 0x9E3779B97F4A7C15ULL;
      s = mix64(x);
    }
    has_spare_ = false;
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<uint64_t>::max(); }

  result_type operator()() { return next(); }

  uint64_t next() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  double uniform() { return unit_double(next()); }

  // Unbiased integer in [0, bound) by rejection.
  uint64_t below(uint64_t bound) {
    if (bound <= 1) return 0;
    const uint64_t limit = max() - max() % bound;
    uint64_t r;
    do {
      r = next();
    } while (r >= limit);
    return r % bound;
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

 private:
  static constexpr uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace gau
