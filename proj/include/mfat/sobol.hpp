#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"

namespace mfat {

namespace detail {

struct SobolPolynomial {
  unsigned degree;
  unsigned coeffs;  // interior coefficients a
  std::array<std::uint32_t, 8> initial;  // m_1..m_degree
};

// Joe & Kuo (new-joe-kuo-6.21201), dimensions 2..20.
inline constexpr std::array<SobolPolynomial, 19> kSobolTable{{
    {1, 0, {1}},
    {2, 1, {1, 3}},
    {3, 1, {1, 3, 1}},
    {3, 2, {1, 1, 1}},
    {4, 1, {1, 1, 3, 3}},
    {4, 4, {1, 3, 5, 13}},
    {5, 2, {1, 1, 5, 5, 17}},
    {5, 4, {1, 1, 5, 5, 5}},
    {5, 7, {1, 1, 7, 11, 19}},
    {5, 11, {1, 1, 5, 1, 1}},
    {5, 13, {1, 1, 1, 3, 11}},
    {5, 14, {1, 3, 5, 5, 31}},
    {6, 1, {1, 3, 3, 9, 7, 49}},
    {6, 13, {1, 1, 1, 15, 21, 21}},
    {6, 16, {1, 3, 1, 13, 27, 49}},
    {6, 19, {1, 1, 1, 15, 7, 5}},
    {6, 22, {1, 3, 1, 15, 13, 25}},
    {6, 25, {1, 1, 5, 5, 19, 61}},
    {7, 1, {1, 3, 7, 11, 23, 15, 103}},
}};

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

inline constexpr std::size_t kMaxSobolDimension = 20;

/// 32-bit Sobol' generator with optional nested uniform (Owen) scrambling.
///
/// Scrambling flips output bit k of coordinate j by a pseudo-random bit that
/// depends on (seed, j, k, leading k bits of the unscrambled coordinate), so
/// every elementary interval is permuted independently.
class SobolSequence {
 public:
  SobolSequence(std::size_t dimension, bool scramble, std::uint64_t seed = 0)
      : dim_(dimension), scramble_(scramble), seed_(seed), directions_(dimension) {
    if (dimension == 0) throw ContractViolation("Sobol dimension must be >= 1");
    if (dimension > kMaxSobolDimension)
      throw CapabilityError("Sobol direction numbers available up to dimension " +
                            std::to_string(kMaxSobolDimension) + ", requested " +
                            std::to_string(dimension));
    for (unsigned k = 0; k < 32; ++k) directions_[0][k] = 1u << (31 - k);
    for (std::size_t j = 1; j < dimension; ++j) {
      const auto& poly = detail::kSobolTable[j - 1];
      const unsigned s = poly.degree;
      auto& v = directions_[j];
      for (unsigned k = 0; k < s && k < 32; ++k) v[k] = poly.initial[k] << (31 - k);
      for (unsigned k = s; k < 32; ++k) {
        std::uint32_t value = v[k - s] ^ (v[k - s] >> s);
        for (unsigned i = 1; i < s; ++i)
          if ((poly.coeffs >> (s - 1 - i)) & 1u) value ^= v[k - i];
        v[k] = value;
      }
    }
  }

  std::size_t dimension() const noexcept { return dim_; }

  /// Raw 32-bit digits of point `index`, coordinate `j` (before scrambling).
  std::uint32_t raw(std::uint32_t index, std::size_t j) const {
    std::uint32_t x = 0;
    for (unsigned k = 0; index != 0; ++k, index >>= 1)
      if (index & 1u) x ^= directions_[j][k];
    return x;
  }

  std::uint32_t scrambled(std::uint32_t index, std::size_t j) const {
    const std::uint32_t x = raw(index, j);
    if (!scramble_) return x;
    const std::uint64_t base = detail::mix64(detail::mix64(seed_) ^ (j + 1));
    std::uint32_t flips = 0;
    for (unsigned k = 0; k < 32; ++k) {
      const std::uint64_t prefix = k == 0 ? 0 : (x >> (32 - k));
      const std::uint64_t h = detail::mix64(base ^ ((std::uint64_t{k} << 32) | prefix));
      flips |= static_cast<std::uint32_t>(h >> 63) << (31 - k);
    }
    return x ^ flips;
  }

  /// Coordinate in (0,1): scrambled points sit at the centre of their
  /// 2^-32 cell; unscrambled points are returned exactly.
  double coordinate(std::uint32_t index, std::size_t j) const {
    constexpr double scale = 1.0 / 4294967296.0;
    if (!scramble_) return raw(index, j) * scale;
    return (static_cast<double>(scrambled(index, j)) + 0.5) * scale;
  }

 private:
  std::size_t dim_;
  bool scramble_;
  std::uint64_t seed_;
  std::vector<std::array<std::uint32_t, 32>> directions_;
};

}  // namespace mfat
