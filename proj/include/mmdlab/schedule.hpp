// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mmdlab/diffcore.hpp"
#include "mmdlab/errors.hpp"
#include "mmdlab/rng.hpp"
#include "mmdlab/tensor.hpp"

namespace mmdlab {

/// Linear-beta noise schedule. Index t runs 0..T; entry 0 is the clean-data
/// convention (beta_0 = 0, alpha_bar_0 = 1).
class NoiseSchedule {
 public:
  NoiseSchedule(int steps, double beta_start, double beta_end) : steps_(steps) {
    detail::require_config(steps >= 1, "schedule: T must be >= 1, got " + std::to_string(steps));
    detail::require_config(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
                           "schedule: need 0 < beta_start <= beta_end < 1");
    beta_.assign(steps + 1, 0.0);
    alpha_.assign(steps + 1, 1.0);
    alpha_bar_.assign(steps + 1, 1.0);
    for (int t = 1; t <= steps; ++t) {
      beta_[t] = steps == 1 ? beta_start
                            : beta_start + (beta_end - beta_start) * (t - 1) / (steps - 1);
      alpha_[t] = 1.0 - beta_[t];
      alpha_bar_[t] = alpha_bar_[t - 1] * alpha_[t];
    }
  }

  int steps() const noexcept { return steps_; }
  double beta(int t) const { return beta_.at(check(t)); }
  double alpha(int t) const { return alpha_.at(check(t)); }
  double alpha_bar(int t) const { return alpha_bar_.at(check(t)); }
  double beta_start() const { return beta_[1]; }
  double beta_end() const { return beta_[steps_]; }

 private:
  int check(int t) const {
    detail::require(t >= 0 && t <= steps_,
                    "timestep " + std::to_string(t) + " outside [0," + std::to_string(steps_) + "]");
    return t;
  }

  int steps_;
  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

inline NoiseSchedule make_schedule(int steps, double beta_start = 1e-4, double beta_end = 2e-2) {
  return NoiseSchedule(steps, beta_start, beta_end);
}

/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps, one timestep for the
/// whole batch. t = 0 is accepted and returns x0.
template <class T>
Tensor<T> forward_marginal(const Tensor<T>& x0, int t, const Tensor<T>& eps,
                           const NoiseSchedule& sched) {
  detail::require(x0.shape() == eps.shape(), "forward_marginal: eps shape differs from x0");
  const double ab = sched.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T s = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + s * eps[i];
  return out;
}

template <class T>
struct CorruptedBatch {
  Tensor<T> x_t;
  std::vector<int> t;
  Tensor<T> eps;
};

/// Independent uniform t in {1..T} and Gaussian eps per row.
template <class T>
CorruptedBatch<T> corrupt_batch(const Tensor<T>& batch, Rng& rng, const NoiseSchedule& sched) {
  detail::require(batch.rank() == 2 && batch.rows() > 0, "corrupt_batch: empty batch");
  const std::size_t n = batch.rows(), d = batch.cols();
  std::uniform_int_distribution<int> pick(1, sched.steps());
  CorruptedBatch<T> out{Tensor<T>::matrix(n, d), std::vector<int>(n), Tensor<T>()};
  for (std::size_t i = 0; i < n; ++i) out.t[i] = pick(rng);
  out.eps = randn<T>(n, d, rng);
  for (std::size_t i = 0; i < n; ++i) {
    const double ab = sched.alpha_bar(out.t[i]);
    const T a = static_cast<T>(std::sqrt(ab));
    const T s = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t j = 0; j < d; ++j) out.x_t(i, j) = a * batch(i, j) + s * out.eps(i, j);
  }
  return out;
}

}  // namespace mmdlab
