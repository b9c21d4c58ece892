#pragma once

// Counter-based deterministic RNG. The stream is a pure function of
// (key, counter), so the same seed reproduces the same draws on every
// platform, and split() derives statistically independent streams for
// per-domain runs, per-tensor init, dropout masks and gate noise.

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace rmroute {

namespace detail {

inline uint64_t mix64(uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(detail::mix64(seed ^ 0x5bf0'3635'aca2'a7e5ull)) {}

  uint64_t next_u64() { return detail::mix64(key_ ^ detail::mix64(counter_++)); }

  // uniform in [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    // Box-Muller; 1-u keeps the log argument in (0, 1]
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // normal(0, sigma) resampled until within 2 sigma
  float trunc_normal(float sigma) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return static_cast<float>(z * sigma);
    }
  }

  // unbiased integer in [0, n)
  int uniform_int(int n) {
    const uint64_t bound = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    for (;;) {
      const uint64_t v = next_u64();
      if (v < limit) return static_cast<int>(v % bound);
    }
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // independent stream derived from this one; does not advance the parent
  Rng split(uint64_t tag) const {
    Rng r(0);
    r.key_ = detail::mix64(key_ ^ detail::mix64(tag ^ 0xd1b5'4a32'd192'ed03ull));
    r.counter_ = 0;
    return r;
  }

  Rng split(std::string_view tag) const { return split(detail::fnv1a(tag)); }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace rmroute
