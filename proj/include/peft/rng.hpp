#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace peft {

// Deterministic SplitMix64 generator. Cheap to seed, so every consumer
// (parameter init, shuffling, dropout, embedding noise) gets its own
// independent stream derived from (seed, stream_id) instead of sharing
// mutable global state. Identical seeds give bit-identical sequences on
// every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix(seed)) {}

  // Independent substream: callers use structured ids (layer index, step
  // counter, ...) and rely on distinct ids giving uncorrelated streams.
  Rng(std::uint64_t seed, std::uint64_t stream_id)
      : state_(mix(mix(seed) ^ mix(stream_id ^ 0xd1b54a32d192ed03ull))) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on [-1, 1).
  double uniform_signed() { return 2.0 * uniform() - 1.0; }

  // Box-Muller without spare caching, so each call consumes exactly two
  // uniforms and the stream position stays easy to reason about.
  double normal(double mean, double stddev) {
    double u1 = 1.0 - uniform();  // (0, 1]: keeps the log finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Fisher-Yates. Modulo bias is immaterial at the sizes we shuffle
  // (thousands of elements against a 64-bit draw).
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace peft
