#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace camid {

/// splitmix64 step; used to derive independent stream seeds from one master
/// seed plus a sequence of tags.
std::uint64_t splitmix64(std::uint64_t& state);

/// Derives a child seed from (seed, tag). Stable across platforms.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

/// Deterministic RNG used everywhere a random draw is needed.
///
/// Engine is std::mt19937_64 (the bit-exact algorithm is fixed by the C++
/// standard). All derived draws (bounded ints, reals, normals, shuffles)
/// are implemented here rather than with std::*_distribution, which is
/// implementation-defined, so sequences are identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Unbiased integer in [0, n) via rejection sampling. n must be > 0.
  std::uint64_t uniform_below(std::uint64_t n);

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via the Box-Muller transform (the second deviate of
  /// each pair is cached).
  double normal();

  /// Normal(0, stddev) truncated to |x| <= 2*stddev by resampling.
  double truncated_normal(double stddev);

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  /// Serializes / restores the engine state (decimal words, space separated).
  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace camid
