#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace panet {

using Rng = std::mt19937_64;

/// Uniform integer in [0, n) by rejection, independent of the standard
/// library's distribution implementation so that seeded runs replay anywhere.
std::size_t uniform_index(Rng& rng, std::size_t n);

/// Uniform real in [0, 1) from the top 53 bits.
double uniform01(Rng& rng);

/// Standard normal via Box-Muller on uniform01.
double standard_normal(Rng& rng);

/// Normal(0, stddev) resampled until within two standard deviations.
double truncated_normal(Rng& rng, double stddev);

/// Fisher-Yates with uniform_index.
template <typename V>
void shuffle_in_place(std::vector<V>& values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    std::size_t j = uniform_index(rng, i);
    std::swap(values[i - 1], values[j]);
  }
}

/// Derives an independent stream for (seed, stream) pairs.
Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0);

}  // namespace panet
