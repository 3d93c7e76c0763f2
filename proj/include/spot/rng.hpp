#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace spot::rng {

// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Named sub-stream of a root seed: derive(root, "scene"), derive(root, "dropout"), ...
// Each component can be re-seeded independently by changing only its name or index.
constexpr std::uint64_t derive(std::uint64_t root, std::string_view name,
                               std::uint64_t index = 0) noexcept {
  return mix64(mix64(root ^ fnv1a(name)) + index);
}

// Counter-based draw: a pure function of (key, counter). Used where draws must
// not depend on evaluation order (dropout masks).
constexpr std::uint64_t counter_bits(std::uint64_t key, std::uint64_t counter) noexcept {
  return mix64(key ^ mix64(counter + 0x632be59bd9b4e019ULL));
}

// Uniform in [0, 1) with 53 bits of resolution.
constexpr double counter_uniform(std::uint64_t key, std::uint64_t counter) noexcept {
  return static_cast<double>(counter_bits(key, counter) >> 11) * 0x1.0p-53;
}

using Engine = std::mt19937_64;

inline Engine engine(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
  return Engine(derive(root, name, index));
}

}  // namespace spot::rng
