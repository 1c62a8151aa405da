// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Test-only oracle: central finite differences, independent of the tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mmdlab/tensor.hpp"

namespace mmdlab::testing {

/// d f / d tensors[k][i] for every coordinate, step h.
inline std::vector<Tensor<double>> central_differences(
    std::vector<Tensor<double>> tensors,
    const std::function<double(const std::vector<Tensor<double>>&)>& f, double h = 1e-6) {
  std::vector<Tensor<double>> out;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    Tensor<double> g(tensors[k].shape());
    for (std::size_t i = 0; i < tensors[k].numel(); ++i) {
      const double orig = tensors[k][i];
      tensors[k][i] = orig + h;
      const double up = f(tensors);
      tensors[k][i] = orig - h;
      const double down = f(tensors);
      tensors[k][i] = orig;
      g[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Worst over tensors of max_i |a_i - b_i| / max_i |b_i|: each tensor's error
/// is measured against that tensor's gradient scale, so isolated near-zero
/// coordinates do not dominate.
inline double max_relative_error(const std::vector<Tensor<double>>& a,
                                 const std::vector<Tensor<double>>& b, double floor = 1e-12) {
  double worst = 0.0;
  for (std::size_t k = 0; k < b.size(); ++k) {
    double scale = floor, err = 0.0;
    for (std::size_t i = 0; i < b[k].numel(); ++i) {
      scale = std::max(scale, std::abs(b[k][i]));
      err = std::max(err, std::abs(a[k][i] - b[k][i]));
    }
    worst = std::max(worst, err / scale);
  }
  return worst;
}

}  // namespace mmdlab::testing
