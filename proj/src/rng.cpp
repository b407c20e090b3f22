#include "reid/rng.hpp"

#include <cmath>
#include <numbers>

namespace reid {

Pcg32::Pcg32(std::uint64_t seed, std::uint64_t stream) : increment_((stream << 1u) | 1u) {
  next_u32();
  state_ += seed;
  next_u32();
}

std::uint32_t Pcg32::next_u32() {
  const std::uint64_t old = state_;
  state_ = old * kMultiplier + increment_;
  const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
  const auto rot = static_cast<std::uint32_t>(old >> 59u);
  return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
}

std::uint64_t Pcg32::next_u64() {
  const std::uint64_t hi = next_u32();
  const std::uint64_t lo = next_u32();
  return (hi << 32u) | lo;
}

double Pcg32::uniform() {
  return static_cast<double>(next_u64() >> 11u) * 0x1.0p-53;
}

double Pcg32::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint32_t Pcg32::below(std::uint32_t n) {
  if (n <= 1) return 0;
  const std::uint32_t threshold = (0u - n) % n;
  for (;;) {
    const std::uint32_t r = next_u32();
    if (r >= threshold) return r % n;
  }
}

double Pcg32::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

Pcg32 Pcg32::split() {
  const std::uint64_t seed = next_u64();
  const std::uint64_t stream = next_u64();
  return Pcg32(seed, stream);
}

}  // namespace reid
