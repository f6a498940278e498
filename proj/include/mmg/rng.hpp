#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace mmg {

using Rng = std::mt19937_64;

/// Independent stream for (seed, purpose...). Different purposes never share a sequence.
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint32_t> purpose = {}) {
  std::vector<std::uint32_t> words;
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  words.insert(words.end(), purpose.begin(), purpose.end());
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// Stream tags used across the toolkit.
namespace stream {
inline constexpr std::uint32_t init = 1;
inline constexpr std::uint32_t train = 2;
inline constexpr std::uint32_t standardize = 3;
inline constexpr std::uint32_t test_set = 4;
inline constexpr std::uint32_t estimate = 5;
inline constexpr std::uint32_t curve = 6;
inline constexpr std::uint32_t final_stage = 7;
}  // namespace stream

}  // namespace mmg
