#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace lcmf {

// splitmix64; used to derive independent seeds from (seed, tag...) tuples so
// that per-sample randomness does not depend on visitation order.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t seed_hash(uint64_t seed) { return mix64(seed); }

template <class... Rest>
uint64_t seed_hash(uint64_t seed, uint64_t first, Rest... rest) {
  return seed_hash(mix64(seed ^ mix64(first)), rest...);
}

// mt19937_64 outputs are pinned by the standard; the distributions are not,
// so sampling helpers are written out here instead of using <random>'s.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // [0, n), rejection-sampled so the result is unbiased and portable.
  uint64_t below(uint64_t n) {
    if (n <= 1) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  int64_t range(int64_t lo, int64_t hi_inclusive) {
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
  }

  bool bernoulli(double p) { return next_double() < p; }

  // First k slots of a Fisher-Yates pass over [0, n); returns k distinct indices.
  std::vector<int64_t> sample_indices(int64_t n, int64_t k) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < k; ++i) {
      const int64_t j = i + static_cast<int64_t>(below(static_cast<uint64_t>(n - i)));
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      const int64_t j = static_cast<int64_t>(below(static_cast<uint64_t>(i + 1)));
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lcmf
