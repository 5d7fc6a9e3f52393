#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bsbi {

/// Named child streams. Each consumer of randomness draws from its own stream
/// so that, e.g., changing the number of diagnostic samples does not perturb
/// the training data.
enum class Stream : std::uint64_t {
  Dataset = 1,
  TestSet = 2,
  Init = 3,
  Shuffle = 4,
  Diagnostics = 5,
};

std::uint64_t splitmix64(std::uint64_t x);

/// Deterministic 64-bit generator with splittable child streams.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  std::uint64_t seed() const { return seed_; }

  /// Child generator whose sequence depends only on (seed, key).
  Rng split(std::uint64_t key) const;
  Rng split(Stream s) const { return split(static_cast<std::uint64_t>(s)); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  double normal(double mean, double sd) { return mean + sd * normal(); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Stable 64-bit FNV-1a hash, used for config hashes and stream keys derived
/// from names.
std::uint64_t fnv1a(std::string_view text);

}  // namespace bsbi
