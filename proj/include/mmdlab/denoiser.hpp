// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mmdlab/diffcore.hpp"
#include "mmdlab/rng.hpp"
#include "mmdlab/schedule.hpp"
#include "mmdlab/tensor.hpp"

namespace mmdlab {

/// MLP noise predictor: [x_t, sinusoidal(t/T)] -> depth x (Linear, SiLU) -> Linear.
struct DenoiserSpec {
  std::size_t dim = 2;
  std::size_t width = 128;
  std::size_t depth = 4;           // hidden layers
  std::size_t time_embedding = 32;  // sin/cos pairs, must be even

  void validate() const {
    detail::require_config(dim > 0 && width > 0 && depth > 0 && time_embedding > 0,
                           "denoiser: dim, width, depth, time_embedding must be positive");
    detail::require_config(time_embedding % 2 == 0, "denoiser: time_embedding must be even");
  }

  std::size_t num_layers() const { return depth + 1; }

  friend bool operator==(const DenoiserSpec&, const DenoiserSpec&) = default;
};

/// Layer k owns tensors[2k] (weight, [in,out]) and tensors[2k+1] (bias, [1,out]).
template <class T>
struct DenoiserParams {
  DenoiserSpec spec;
  std::vector<Tensor<T>> tensors;

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (std::size_t k = 0; k < spec.num_layers(); ++k) {
      out.push_back("layer" + std::to_string(k) + ".weight");
      out.push_back("layer" + std::to_string(k) + ".bias");
    }
    return out;
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }

  template <class U>
  DenoiserParams<U> cast() const {
    DenoiserParams<U> out{spec, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  friend bool operator==(const DenoiserParams&, const DenoiserParams&) = default;
};

inline std::vector<std::pair<std::size_t, std::size_t>> layer_dims(const DenoiserSpec& spec) {
  std::vector<std::pair<std::size_t, std::size_t>> dims;
  dims.emplace_back(spec.dim + spec.time_embedding, spec.width);
  for (std::size_t k = 1; k < spec.depth; ++k) dims.emplace_back(spec.width, spec.width);
  dims.emplace_back(spec.width, spec.dim);
  return dims;
}

/// Gaussian weights with std 1/sqrt(fan_in), zero biases.
template <class T>
DenoiserParams<T> init_denoiser(const DenoiserSpec& spec, Rng& rng) {
  spec.validate();
  DenoiserParams<T> p{spec, {}};
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto [in, out] : layer_dims(spec)) {
    Tensor<T> w = Tensor<T>::matrix(in, out);
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : w.data()) v = static_cast<T>(s * dist(rng));
    p.tensors.push_back(std::move(w));
    p.tensors.push_back(Tensor<T>::matrix(1, out));
  }
  return p;
}

/// Sinusoidal features of t/T: [sin(s*w_k), cos(s*w_k)], w_k = 1000 * 10000^(-k/half).
template <class T>
diff::Var<T> time_embedding(diff::Tape<T>& tape, std::span<const int> t, int total_steps,
                            std::size_t width) {
  const std::size_t half = width / 2;
  Tensor<T> s = Tensor<T>::matrix(t.size(), 1);
  for (std::size_t i = 0; i < t.size(); ++i) {
    s(i, 0) = static_cast<T>(static_cast<double>(t[i]) / total_steps);
  }
  Tensor<T> freq = Tensor<T>::matrix(1, half);
  for (std::size_t k = 0; k < half; ++k) {
    freq(0, k) = static_cast<T>(1000.0 * std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                                  static_cast<double>(half)));
  }
  auto angles = diff::mul(tape.constant(std::move(s)), tape.constant(std::move(freq)));
  return diff::concat_cols(diff::sin(angles), diff::cos(angles));
}

/// eps_theta(x_t, t) on a tape; `weights` are the parameter tensors already
/// placed on the same tape (as leaves or constants).
template <class T>
diff::Var<T> predict_noise(const DenoiserSpec& spec, std::span<const diff::Var<T>> weights,
                           const diff::Var<T>& x_t, std::span<const int> t, int total_steps) {
  detail::require(x_t.value().rank() == 2 && x_t.cols() == spec.dim,
                  "predict_noise: x_t has " + std::to_string(x_t.value().rank() == 2 ? x_t.cols() : 0) +
                      " columns, denoiser expects " + std::to_string(spec.dim));
  detail::require(t.size() == x_t.rows(), "predict_noise: one timestep per row required");
  detail::require(weights.size() == 2 * spec.num_layers(), "predict_noise: wrong parameter count");
  diff::Tape<T>& tape = x_t.tape();
  auto h = diff::concat_cols(x_t, time_embedding(tape, t, total_steps, spec.time_embedding));
  for (std::size_t k = 0; k < spec.num_layers(); ++k) {
    h = diff::add(diff::matmul(h, weights[2 * k]), weights[2 * k + 1]);
    if (k + 1 < spec.num_layers()) h = diff::silu(h);
  }
  return h;
}

template <class T>
std::vector<diff::Var<T>> place(diff::Tape<T>& tape, std::span<const Tensor<T>> tensors,
                                bool trainable) {
  std::vector<diff::Var<T>> out;
  out.reserve(tensors.size());
  for (const auto& t : tensors) out.push_back(trainable ? tape.leaf(t) : tape.constant(t));
  return out;
}

/// Gradient-free evaluation on a throwaway tape.
template <class T>
Tensor<T> predict_noise(const DenoiserParams<T>& params, const Tensor<T>& x_t,
                        std::span<const int> t, int total_steps) {
  diff::Tape<T> tape;
  auto w = place<T>(tape, params.tensors, false);
  auto x = tape.constant(x_t);
  return predict_noise<T>(params.spec, w, x, t, total_steps).value();
}

template <class T>
Tensor<T> predict_noise(const DenoiserParams<T>& params, const Tensor<T>& x_t, int t,
                        int total_steps) {
  std::vector<int> ts(x_t.rows(), t);
  return predict_noise(params, x_t, std::span<const int>(ts), total_steps);
}

struct PretrainConfig {
  long iterations = 20000;
  std::size_t batch = 128;
  diff::AdamConfig adam{2e-4, 0.9, 0.999, 1e-8};
};

template <class T>
struct PretrainResult {
  DenoiserParams<T> params;
  std::vector<double> loss_history;
};

/// Mean squared error between injected and predicted noise on one corrupted batch.
template <class T>
diff::Var<T> denoising_loss(const DenoiserSpec& spec, std::span<const diff::Var<T>> weights,
                            const CorruptedBatch<T>& cb, int total_steps) {
  diff::Tape<T>& tape = weights.front().tape();
  auto x = tape.constant(cb.x_t);
  auto pred = predict_noise<T>(spec, weights, x, cb.t, total_steps);
  auto err = diff::sub(tape.constant(cb.eps), pred);
  return diff::mean(diff::mul(err, err));
}

/// Standard simplified-objective training: batches drawn with replacement,
/// one Adam step per iteration.
template <class T>
PretrainResult<T> pretrain(const DenoiserParams<T>& init, const Tensor<T>& dataset,
                           const NoiseSchedule& sched, const PretrainConfig& cfg, Rng& rng) {
  detail::require(dataset.rank() == 2 && dataset.rows() > 0, "pretrain: empty dataset");
  detail::require(dataset.cols() == init.spec.dim, "pretrain: dataset dimension mismatch");
  PretrainResult<T> res{init, {}};
  res.loss_history.reserve(static_cast<std::size_t>(std::max(0L, cfg.iterations)));
  auto state = diff::AdamState<T>::init(cfg.adam, res.params.tensors);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.rows() - 1);
  std::vector<std::size_t> idx(cfg.batch);
  for (long it = 0; it < cfg.iterations; ++it) {
    for (auto& i : idx) i = pick(rng);
    Tensor<T> batch = gather_rows(dataset, std::span<const std::size_t>(idx));
    CorruptedBatch<T> cb = corrupt_batch(batch, rng, sched);
    diff::Tape<T> tape;
    auto w = place<T>(tape, res.params.tensors, true);
    double loss_value = std::nan("");
    std::vector<Tensor<T>> grads;
    try {
      auto loss = denoising_loss<T>(res.params.spec, w, cb, sched.steps());
      loss_value = loss.value().item();
      grads = diff::grad<T>(tape, loss, w);
    } catch (const NonFiniteError& e) {
      throw TrainingAborted("pretrain: non-finite value at iteration " + std::to_string(it) +
                                " (" + e.what() + ")",
                            it, loss_value);
    }
    res.loss_history.push_back(loss_value);
    diff::adam_step<T>(res.params.tensors, grads, state);
  }
  return res;
}

}  // namespace mmdlab
