// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

#include "mmdlab/tensor.hpp"

namespace mmdlab {

using Rng = std::mt19937_64;

/// Independent stream for (seed, stream id). Sub-runs derive their generators
/// from this instead of sharing one engine, so results do not depend on the
/// order in which sub-runs execute.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32), 0x6d6d64u};
  return Rng(seq);
}

template <class T>
Tensor<T> randn(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> out = Tensor<T>::matrix(rows, cols);
  for (auto& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace mmdlab
