#pragma once

// FNV-1a hashing for quick content fingerprints (not cryptographic).

#include <bit>
#include <cstdint>
#include <span>
#include <vector>

namespace mcam {

inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr uint64_t kFnvPrime = 0x100000001b3ull;

inline uint64_t fnv1a64(std::span<const unsigned char> bytes, uint64_t state = kFnvOffset) {
  for (unsigned char b : bytes) {
    state ^= b;
    state *= kFnvPrime;
  }
  return state;
}

// Hashes the exact bit patterns of the doubles, so equal hashes mean
// bit-identical values.
inline uint64_t fnv1a64(std::span<const double> values, uint64_t state = kFnvOffset) {
  for (double v : values) {
    uint64_t bits = std::bit_cast<uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      state ^= static_cast<unsigned char>(bits >> (8 * i));
      state *= kFnvPrime;
    }
  }
  return state;
}

}  // namespace mcam
