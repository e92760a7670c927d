#pragma once

// Splittable counter-based random stream. Every stochastic operation takes an
// explicit stream so runs are bit-reproducible from the config seed alone.
// output_i = mix(key + i * phi); children derive a fresh key from a label.

#include <cstdint>
#include <string_view>
#include <vector>

#include "poigraph/common.hpp"

namespace poigraph {

class RngStream {
 public:
  explicit RngStream(uint64_t key) : key_(mix(key ^ 0x5851f42d4c957f2dULL)) {}

  // Derives an independent child stream; (seed, label) pairs are stable
  // across runs and platforms.
  RngStream split(std::string_view label) const {
    return RngStream(mix(key_ ^ fnv1a64(label)));
  }
  RngStream split(uint64_t index) const {
    return RngStream(mix(key_ ^ mix(index + 0x9e3779b97f4a7c15ULL)));
  }

  uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

  // Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) {
    // Modulo bias is irrelevant at the n this project uses (n << 2^64).
    return n == 0 ? 0 : next_u64() % n;
  }

  bool bernoulli(double p) { return next_double() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Index draw from explicit nonnegative weights.
  size_t weighted_pick(const std::vector<double>& weights) {
    double total = 0;
    for (double w : weights) total += w;
    double r = next_double() * total;
    for (size_t i = 0; i < weights.size(); ++i) {
      r -= weights[i];
      if (r < 0) return i;
    }
    return weights.empty() ? 0 : weights.size() - 1;
  }

 private:
  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace poigraph
