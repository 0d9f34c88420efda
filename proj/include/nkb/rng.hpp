// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Seed derivation and content digests. Every random stream in the project
// is seeded from the master seed through derive_seed(), never from ambient
// state.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace nkb {

/// One step of the splitmix64 generator (Steele, Lea, Flood 2014).
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::span<const double> values,
                      std::uint64_t h = 0xCBF29CE484222325ULL);

/// Seed for a named sub-stream: splitmix64(master ^ fnv1a64(label)).
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
  return splitmix64(master ^ fnv1a64(label));
}

std::string hex64(std::uint64_t v);

}  // namespace nkb
