// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// MMD finetuning under a fixed timestep budget: sample through the budgeted
// chain on a tape (one checkpoint segment per timestep), embed the output,
// and minimize the unbiased squared MMD against a fresh real batch.

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmdlab/denoiser.hpp"
#include "mmdlab/diffcore.hpp"
#include "mmdlab/features.hpp"
#include "mmdlab/mmd.hpp"
#include "mmdlab/rng.hpp"
#include "mmdlab/sampler.hpp"
#include "mmdlab/schedule.hpp"

namespace mmdlab {

struct FinetuneConfig {
  TimestepSubset subset;
  SamplerKind sampler = SamplerKind::ddim;
  KernelSpec kernel;
  diff::AdamConfig adam{5e-6, 0.9, 0.999, 1e-8};
  std::size_t batch = 128;
  long iterations = 500;
  bool checkpointing = true;
  long eval_every = 0;  // 0 disables held-out snapshots

  void validate() const {
    detail::require_config(iterations >= 1, "finetune: iterations must be >= 1");
    detail::require_config(batch >= 2, "finetune: batch size N must be >= 2");
    detail::require_config(subset.budget() >= 1, "finetune: empty timestep subset");
    kernel.validate();
  }
};

struct FinetuneStep {
  long iteration = 0;
  double loss = 0.0;  // full estimate, real-real term included
  std::optional<double> heldout_mmd2;
  double millis = 0.0;
};

struct FinetuneHistory {
  std::vector<FinetuneStep> steps;
};

class FinetuneDiverged : public TrainingAborted {
 public:
  FinetuneDiverged(const std::string& what, long iteration, double loss, FinetuneHistory h)
      : TrainingAborted(what, iteration, loss), history(std::move(h)) {}
  FinetuneHistory history;
};

template <class T>
struct GeneratorLoss {
  diff::Var<T> loss;       // optimizer form, real-real term omitted
  double real_term = 0.0;  // the omitted term, for reporting
  double sigma = 1.0;
};

/// Loss on an existing tape. `weights` are the denoiser parameters on that tape.
template <class T>
GeneratorLoss<T> generator_loss(const DenoiserSpec& spec, std::span<const diff::Var<T>> weights,
                                const FinetuneConfig& cfg, const Tensor<T>& real_batch,
                                const ChainNoise<T>& noise, const FeatureMap<T>& features,
                                const NoiseSchedule& sched) {
  detail::require(real_batch.rows() == noise.x_T.rows(),
                  "generator_loss: real batch size differs from the generated batch size");
  diff::Tape<T>& tape = weights.front().tape();
  auto x_T = tape.constant(noise.x_T);
  std::vector<diff::Var<T>> step_noise;
  for (const auto& z : noise.step_noise) step_noise.push_back(tape.constant(z));
  diff::Var<T> x0;
  try {
    x0 = chain_on_tape<T>(spec, weights, cfg.subset, cfg.sampler, x_T, step_noise, sched,
                          cfg.checkpointing);
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(std::string("generator_loss: sampling chain (budget ") +
                         std::to_string(cfg.subset.budget()) + ", " + to_string(cfg.sampler) +
                         ") produced non-finite values: " + e.what());
  }
  auto fx = featurize(features, x0);
  const Tensor<T> fy_value = featurize(features, real_batch);
  auto fy = tape.constant(fy_value);
  const double sigma = resolve_sigma(cfg.kernel, fx.value(), fy_value);
  GeneratorLoss<T> out{mmd2_unbiased<T>(fx, fy, cfg.kernel, false, sigma), 0.0, sigma};
  // Real-real term, evaluated once for reporting (no gradient in theta).
  diff::Tape<T> side;
  auto fyc = side.constant(fy_value);
  auto kyy = gram(cfg.kernel, fyc, fyc, sigma);
  auto masked = diff::mul(kyy, side.constant(detail::off_diagonal_mask<T>(fy_value.rows())));
  const double n = static_cast<double>(fy_value.rows());
  out.real_term = static_cast<double>(diff::sum(masked).value().item()) / (n * (n - 1.0));
  return out;
}

/// Self-contained variant that owns its tape.
template <class T>
struct LossGraph {
  std::unique_ptr<diff::Tape<T>> tape;
  std::vector<diff::Var<T>> weights;
  GeneratorLoss<T> loss;
};

template <class T>
LossGraph<T> generator_loss(const DenoiserParams<T>& params, const FinetuneConfig& cfg,
                            const Tensor<T>& real_batch, const FeatureMap<T>& features,
                            const NoiseSchedule& sched, Rng& rng) {
  LossGraph<T> g{std::make_unique<diff::Tape<T>>(), {}, {}};
  g.weights = place<T>(*g.tape, params.tensors, true);
  const ChainNoise<T> noise =
      draw_chain_noise<T>(cfg.subset, cfg.sampler, real_batch.rows(), params.spec.dim, rng);
  g.loss = generator_loss<T>(params.spec, g.weights, cfg, real_batch, noise, features, sched);
  return g;
}

template <class T>
struct FinetuneResult {
  DenoiserParams<T> params;
  FinetuneHistory history;
};

using HeldoutProbe = std::function<double(const DenoiserParams<float>&)>;

/// Runs cfg.iterations of (fresh real batch, fresh x_T, loss, grad, Adam).
/// Real rows are drawn with replacement. `probe`, when set, is called every
/// cfg.eval_every iterations (and after the last) on a snapshot.
template <class T>
FinetuneResult<T> finetune(const DenoiserParams<T>& init, const FinetuneConfig& cfg,
                           const Tensor<T>& train, const FeatureMap<T>& features,
                           const NoiseSchedule& sched, Rng& rng,
                           const std::function<double(const DenoiserParams<T>&)>& probe = {}) {
  cfg.validate();
  detail::require(train.rows() >= 2 && train.cols() == init.spec.dim,
                  "finetune: training data has the wrong shape");
  FinetuneResult<T> res{init, {}};
  auto state = diff::AdamState<T>::init(cfg.adam, res.params.tensors);
  std::uniform_int_distribution<std::size_t> pick(0, train.rows() - 1);
  std::vector<std::size_t> idx(cfg.batch);
  double initial = 0.0;
  long above = 0;
  for (long it = 0; it < cfg.iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    for (auto& i : idx) i = pick(rng);
    const Tensor<T> real = gather_rows(train, std::span<const std::size_t>(idx));
    double reported = std::nan("");
    std::vector<Tensor<T>> grads;
    try {
      LossGraph<T> g = generator_loss<T>(res.params, cfg, real, features, sched, rng);
      reported = static_cast<double>(g.loss.loss.value().item()) + g.loss.real_term;
      grads = diff::grad<T>(*g.tape, g.loss.loss, g.weights);
    } catch (const NonFiniteError& e) {
      throw FinetuneDiverged("finetune: iteration " + std::to_string(it) + ": " + e.what(), it,
                             reported, res.history);
    }
    diff::adam_step<T>(res.params.tensors, grads, state);

    FinetuneStep step{it, reported, std::nullopt, 0.0};
    if (probe && cfg.eval_every > 0 && ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations)) {
      step.heldout_mmd2 = probe(res.params);
    }
    step.millis = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                      .count();
    res.history.steps.push_back(step);

    if (it == 0) initial = reported;
    above = reported > 10.0 * std::abs(initial) ? above + 1 : 0;
    if (above >= 50) {
      throw FinetuneDiverged("finetune: loss above 10x its initial value for 50 iterations", it,
                             reported, res.history);
    }
  }
  return res;
}

}  // namespace mmdlab
