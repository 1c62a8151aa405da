// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmdlab/errors.hpp"
#include "mmdlab/rng.hpp"
#include "mmdlab/tensor.hpp"

namespace mmdlab {

/// ring8: 8 Gaussians (std 0.05) on a radius-2 circle.
/// swissroll: (t cos t, t sin t), t ~ U(1.5pi, 4.5pi), plus N(0, 0.1^2) noise.
/// checkerboard: uniform over the 8 dark cells of a 4x4 board of unit cells on [-2,2]^2.
enum class ToyKind { ring8, swissroll, checkerboard };

inline std::string to_string(ToyKind k) {
  switch (k) {
    case ToyKind::ring8: return "ring8";
    case ToyKind::swissroll: return "swissroll";
    case ToyKind::checkerboard: return "checkerboard";
  }
  return "?";
}

inline ToyKind parse_toy_kind(const std::string& s) {
  if (s == "ring8") return ToyKind::ring8;
  if (s == "swissroll") return ToyKind::swissroll;
  if (s == "checkerboard") return ToyKind::checkerboard;
  throw ConfigError("unknown dataset kind '" + s + "' (ring8|swissroll|checkerboard)");
}

namespace toy {
inline constexpr double ring_radius = 2.0;
inline constexpr double ring_std = 0.05;
inline constexpr double swiss_noise = 0.1;
inline constexpr double swiss_t0 = 1.5 * std::numbers::pi;
inline constexpr double swiss_t1 = 4.5 * std::numbers::pi;

inline std::array<double, 2> ring_center(int k) {
  const double a = 2.0 * std::numbers::pi * k / 8.0;
  return {ring_radius * std::cos(a), ring_radius * std::sin(a)};
}
}  // namespace toy

/// Affine map raw -> standardized: (raw - mean) / scale, per coordinate.
struct Standardization {
  std::array<double, 2> mean{0.0, 0.0};
  std::array<double, 2> scale{1.0, 1.0};
};

/// Population moments of each distribution, fixed per kind.
inline Standardization standardization(ToyKind kind) {
  switch (kind) {
    case ToyKind::ring8: {
      // E[r^2 cos^2] over 8 equally spaced angles is r^2/2.
      const double var = toy::ring_radius * toy::ring_radius / 2.0 + toy::ring_std * toy::ring_std;
      return {{0.0, 0.0}, {std::sqrt(var), std::sqrt(var)}};
    }
    case ToyKind::checkerboard: {
      // Both marginals are uniform on [-2, 2].
      const double sd = std::sqrt(16.0 / 12.0);
      return {{0.0, 0.0}, {sd, sd}};
    }
    case ToyKind::swissroll: {
      // Moments of (t cos t, t sin t) under uniform t, by composite Simpson.
      const int n = 20000;
      const double h = (toy::swiss_t1 - toy::swiss_t0) / n;
      double mx = 0, my = 0, sxx = 0, syy = 0;
      for (int i = 0; i <= n; ++i) {
        const double t = toy::swiss_t0 + i * h;
        const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
        const double x = t * std::cos(t), y = t * std::sin(t);
        mx += w * x;
        my += w * y;
        sxx += w * x * x;
        syy += w * y * y;
      }
      const double norm = h / 3.0 / (toy::swiss_t1 - toy::swiss_t0);
      mx *= norm;
      my *= norm;
      sxx *= norm;
      syy *= norm;
      const double nv = toy::swiss_noise * toy::swiss_noise;
      return {{mx, my}, {std::sqrt(sxx - mx * mx + nv), std::sqrt(syy - my * my + nv)}};
    }
  }
  return {};
}

template <class T>
struct LabeledBatch {
  Tensor<T> points;
  std::vector<int> labels;  // mode / cell index, -1 for swissroll
};

/// Standardized draws together with the component each came from.
template <class T>
LabeledBatch<T> sample_toy_labeled(ToyKind kind, std::size_t n, Rng& rng) {
  detail::require(n >= 1, "sample_toy: n must be >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Standardization st = standardization(kind);
  LabeledBatch<T> out{Tensor<T>::matrix(n, 2), std::vector<int>(n, -1)};
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0, y = 0;
    switch (kind) {
      case ToyKind::ring8: {
        const int k = std::uniform_int_distribution<int>(0, 7)(rng);
        const auto c = toy::ring_center(k);
        x = c[0] + toy::ring_std * normal(rng);
        y = c[1] + toy::ring_std * normal(rng);
        out.labels[i] = k;
        break;
      }
      case ToyKind::swissroll: {
        const double t = toy::swiss_t0 + (toy::swiss_t1 - toy::swiss_t0) * unit(rng);
        x = t * std::cos(t) + toy::swiss_noise * normal(rng);
        y = t * std::sin(t) + toy::swiss_noise * normal(rng);
        break;
      }
      case ToyKind::checkerboard: {
        const int col = std::uniform_int_distribution<int>(0, 3)(rng);
        const int row = 2 * std::uniform_int_distribution<int>(0, 1)(rng) + (col % 2);
        x = -2.0 + col + unit(rng);
        y = -2.0 + row + unit(rng);
        out.labels[i] = row * 4 + col;
        break;
      }
    }
    out.points(i, 0) = static_cast<T>((x - st.mean[0]) / st.scale[0]);
    out.points(i, 1) = static_cast<T>((y - st.mean[1]) / st.scale[1]);
  }
  return out;
}

template <class T>
Tensor<T> sample_toy(ToyKind kind, std::size_t n, Rng& rng) {
  return sample_toy_labeled<T>(kind, n, rng).points;
}

template <class T>
struct Dataset {
  ToyKind kind = ToyKind::ring8;
  std::uint64_t seed = 0;
  Standardization standardization;
  Tensor<T> points;
};

template <class T>
Dataset<T> make_dataset(ToyKind kind, std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x64617461);
  return Dataset<T>{kind, seed, mmdlab::standardization(kind), sample_toy<T>(kind, n, rng)};
}

template <class T>
struct Split {
  Tensor<T> train;
  Tensor<T> heldout;
};

/// Seeded shuffle, then the first round(n * heldout_ratio) rows are held out.
template <class T>
Split<T> split_dataset(const Tensor<T>& points, double heldout_ratio, std::uint64_t seed) {
  detail::require_config(heldout_ratio > 0.0 && heldout_ratio < 1.0,
                         "dataset: heldout_ratio must be in (0,1)");
  const std::size_t n = points.rows();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = make_rng(seed, 0x73706c74);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto held = static_cast<std::size_t>(std::llround(static_cast<double>(n) * heldout_ratio));
  detail::require_config(held >= 2 && n - held >= 2, "dataset: split leaves fewer than 2 rows");
  std::span<const std::size_t> all(perm);
  return Split<T>{gather_rows(points, all.subspan(held)), gather_rows(points, all.first(held))};
}

}  // namespace mmdlab
