#pragma once

#include <cstdint>

namespace ssae {

/// SplitMix64 finalizer. Used for seeding and for deriving child seeds.
std::uint64_t splitmix64(std::uint64_t x);

/// Derives an independent seed for sub-stream `stream_index` of `parent_seed`:
///   child = splitmix64(parent_seed + 0x9E3779B97F4A7C15 * (stream_index + 1))
std::uint64_t mix_seed(std::uint64_t parent_seed, std::uint64_t stream_index);

/// xoshiro256** generator.
///
/// State is four 64-bit words filled from successive splitmix64 outputs of
/// the seed (the state word s[i] is splitmix64 applied to
/// seed + (i + 1) * 0x9E3779B97F4A7C15). Each draw returns
///   rotl(s1 * 5, 7) * 9
/// then advances with t = s1 << 17; s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3;
/// s2 ^= t; s3 = rotl(s3, 45).
///
/// uniform() takes the top 53 bits: (next() >> 11) * 2^-53, in [0, 1).
/// normal() uses Box-Muller on two uniforms, u1 mapped to (0, 1]:
///   r = sqrt(-2 ln(1 - u1)), returns r cos(2 pi u2) then r sin(2 pi u2).
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n). Rejection sampling, so unbiased.
  std::uint64_t below(std::uint64_t n);

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace ssae
