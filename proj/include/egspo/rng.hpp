#pragma once

/**
 * Deterministic RNG: xoshiro256++ seeded through splitmix64.
 *
 * std::<random> distributions are implementation-defined, so every draw here
 * is constructed from raw bits. All randomness in the project derives
 * statelessly from (master seed, purpose string, counters) via derive_stream,
 * which keeps parallel generation and checkpoint resume bitwise reproducible.
 */

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "common.hpp"

namespace egspo {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl_(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl_(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), rejection-sampled (n > 0).
  uint64_t below(uint64_t n) {
    if (n == 0) throw InvalidInput("Rng::below: n must be positive");
    const uint64_t threshold = (0ull - n) % n;  // 2^64 mod n
    uint64_t r = next_u64();
    while (r < threshold) r = next_u64();
    return r % n;
  }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t range(int64_t lo, int64_t hi) {
    if (hi < lo) throw InvalidInput("Rng::range: empty range");
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo) + 1));
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller (deterministic, no cached spare).
  double normal() {
    const double u1 = 1.0 - uniform01();  // (0, 1], keeps log finite
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Fisher-Yates permutation of [0, n).
  std::vector<size_t> permutation(size_t n) {
    std::vector<size_t> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = i;
    for (size_t i = n; i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

  std::array<uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

 private:
  static uint64_t rotl_(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<uint64_t, 4> state_{};
};

/// Hashes (seed, purpose, counters) into an independent stream seed.
inline uint64_t derive_seed(uint64_t master, std::string_view purpose,
                            uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
  uint64_t h = master ^ 0xD1B54A32D192ED03ull;
  for (char ch : purpose) {
    h ^= static_cast<uint64_t>(static_cast<unsigned char>(ch));
    h = splitmix64(h);
  }
  h ^= a;
  h = splitmix64(h);
  h ^= b;
  h = splitmix64(h);
  h ^= c;
  h = splitmix64(h);
  return h;
}

inline Rng derive_stream(uint64_t master, std::string_view purpose,
                         uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
  return Rng(derive_seed(master, purpose, a, b, c));
}

}  // namespace egspo
