#pragma once

#include <cstdint>
#include <random>

namespace nbx {

/// Seeded generator shared by every stochastic component.
///
/// Bits come from std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The seed is first passed through one SplitMix64 round so nearby
/// seeds give unrelated streams. Uniform doubles use the top 53 bits:
/// u = (bits >> 11) * 2^-53, in [0, 1). Normals use the Box-Muller transform on
/// (1 - u1, u2), returning the cosine branch first and caching the sine branch.
///
/// Splitting: `split(stream)` seeds a child with
/// splitmix64(seed ^ splitmix64(stream + 0x9E3779B97F4A7C15)), which depends only
/// on the root seed and the stream id, never on how much of the parent was consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform();
  /// Uniform on [lo, hi); exactly lo when lo == hi.
  double uniform(double lo, double hi);
  /// Standard normal draw.
  double normal();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

}  // namespace nbx
