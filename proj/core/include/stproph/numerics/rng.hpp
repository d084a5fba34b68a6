// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace stproph::num {

/// Seedable generator that can be split by label. A child stream depends only
/// on the parent's seed and the label, never on how much of the parent has
/// been consumed, so every stochastic site (init, dropout, masking, batch
/// order) is reproducible on its own.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  Rng split(std::string_view label) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  double normal(double mean = 0.0, double stddev = 1.0);
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  /// Uniform integer in [lo, hi] inclusive.
  std::size_t between(std::size_t lo, std::size_t hi);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  /// Engine state as text; restore() reproduces the exact stream position.
  std::string state() const;
  void restore(std::uint64_t seed, const std::string& state);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL);

}  // namespace stproph::num
