#pragma once

#include <cstdint>

namespace reid {

/// PCG32 (XSH-RR output, 64-bit LCG state), O'Neill 2014 reference constants.
///
/// This generator is part of the on-disk reproducibility contract: synthetic
/// datasets, fixtures and benchmark reports are defined in terms of its
/// output stream. Changing any constant or derived distribution below changes
/// every seeded result, so bump kRngVersion when doing so.
///
/// Derived draws:
///   uniform()      53-bit double in [0, 1) from two consecutive u32 outputs
///   uniform(a, b)  a + (b - a) * uniform()
///   below(n)       unbiased integer in [0, n) by threshold rejection
///   normal()       Box-Muller, both outputs used in turn
///   split()        child generator seeded from two u64 draws of the parent
class Pcg32 {
 public:
  static constexpr int kRngVersion = 1;
  static constexpr std::uint64_t kMultiplier = 6364136223846793005ULL;
  static constexpr std::uint64_t kDefaultStream = 1442695040888963407ULL;

  explicit Pcg32(std::uint64_t seed, std::uint64_t stream = kDefaultStream);

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  double uniform();
  double uniform(double lo, double hi);
  std::uint32_t below(std::uint32_t n);
  double normal();

  /// Independent child stream; advances the parent by two u64 draws.
  Pcg32 split();

 private:
  std::uint64_t state_ = 0;
  std::uint64_t increment_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace reid
