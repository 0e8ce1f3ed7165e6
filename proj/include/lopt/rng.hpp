#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include <Eigen/Core>

namespace lopt {

// Counter-based random numbers. Every draw is a pure function of
// (seed, stream, counter), so rollouts are reproducible regardless of the
// order in which seeds or timesteps are evaluated.

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_key(std::uint64_t seed, std::uint64_t stream,
                                 std::uint64_t counter) noexcept {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ (stream * 0xd1342543de82ef95ULL));
  return splitmix64(h ^ (counter * 0xaf251af3b0f025b5ULL));
}

// Derives an independent child seed, e.g. per particle or per episode.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                    std::uint64_t b = 0) noexcept {
  return hash_key(seed ^ 0x5851f42d4c957f2dULL, a, b);
}

/// Sequential view over a counter-based stream. Copyable; two copies with the
/// same key produce the same sequence.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t start = 0) noexcept
      : seed_(seed), stream_(stream), counter_(start) {}

  std::uint64_t next_u64() noexcept { return hash_key(seed_, stream_, counter_++); }

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (cosine branch only, two uniforms per draw).
  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename Scalar = double>
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> normal_vector(Eigen::Index n) {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = static_cast<Scalar>(normal());
    return v;
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_;
};

}  // namespace lopt
