#pragma once

#include <cstdint>
#include <random>

#include "refprior/matrix.hpp"

namespace refprior {

using Rng = std::mt19937_64;

/// Independent stream derived from a base seed; keeps e.g. structure and
/// noise draws of a synthetic dataset decoupled.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

template <typename T = float>
num::Matrix<T> gaussian_matrix(std::size_t rows, std::size_t cols, T stddev, Rng& rng) {
  std::normal_distribution<T> dist(T{0}, stddev);
  num::Matrix<T> m(rows, cols);
  for (auto& v : m.flat()) v = dist(rng);
  return m;
}

}  // namespace refprior
