#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace molhf {

/// Counter-based generator: output k of a stream is a pure function of
/// (key, k), so streams can be split and positioned without hidden state.
/// The mixing function is the SplitMix64 finalizer.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x6a09e667f3bcc908ULL)) {}

  static Rng from_state(std::uint64_t key, std::uint64_t counter) {
    Rng r;
    r.key_ = key;
    r.counter_ = counter;
    return r;
  }

  /// Independent child stream; does not advance this stream.
  Rng split(std::uint64_t stream) const {
    return from_state(mix(key_ ^ mix(stream + 0x9e3779b97f4a7c15ULL)), 0);
  }

  std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) { return bound == 0 ? 0 : next_u64() % bound; }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace molhf
