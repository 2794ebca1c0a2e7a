#pragma once

#include <cstdint>
#include <random>

namespace capsar {

// Deterministic generator: std::mt19937_64 (fully specified by the C++
// standard, so identical across platforms) with hand-written conversions to
// floating point. Standard <random> distributions are not used because their
// output is implementation-defined.
//
// Draw order used by the library:
//   1. embedding rows for uncovered words, in vocabulary index order;
//   2. model parameters, in canonical sorted name order, row-major;
//   3. per epoch: one shuffle, then one stream seed per example in batch order
//      (each example's dropout masks come from its own derived stream).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n) by rejection, unbiased.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Fisher-Yates.
  template <typename Container>
  void shuffle(Container& c) {
    for (std::size_t i = c.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(c[i - 1], c[j]);
    }
  }

  // Independent stream for one unit of work (e.g. one example's dropout).
  Rng fork() { return Rng(next_u64()); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace capsar
