// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mmdlab/denoiser.hpp"
#include "mmdlab/diffcore.hpp"
#include "mmdlab/errors.hpp"
#include "mmdlab/rng.hpp"
#include "mmdlab/schedule.hpp"

namespace mmdlab {

enum class SubsetMethod { linear, quadratic };
enum class SamplerKind { ddpm, ddim };

inline std::string to_string(SubsetMethod m) {
  return m == SubsetMethod::linear ? "linear" : "quadratic";
}
inline std::string to_string(SamplerKind k) { return k == SamplerKind::ddpm ? "ddpm" : "ddim"; }

inline SubsetMethod parse_subset_method(const std::string& s) {
  if (s == "linear") return SubsetMethod::linear;
  if (s == "quadratic") return SubsetMethod::quadratic;
  throw ConfigError("unknown timestep selection method '" + s + "' (linear|quadratic)");
}
inline SamplerKind parse_sampler_kind(const std::string& s) {
  if (s == "ddpm") return SamplerKind::ddpm;
  if (s == "ddim") return SamplerKind::ddim;
  throw ConfigError("unknown sampler '" + s + "' (ddpm|ddim)");
}

/// Budgeted timesteps, stored descending. The chain always ends at t = 0.
struct TimestepSubset {
  SubsetMethod method = SubsetMethod::linear;
  int total_steps = 0;
  std::vector<int> steps;

  std::size_t budget() const noexcept { return steps.size(); }
  /// Target of step i (0 after the last selected timestep).
  int target(std::size_t i) const { return i + 1 < steps.size() ? steps[i + 1] : 0; }
};

/// linear: floor(c*i) with c = T/budget; quadratic: floor(c*i^2) with
/// c = T/budget^2, i = 1..budget. Evaluated in integer arithmetic so that the
/// largest timestep is exactly T.
inline TimestepSubset select_timesteps(SubsetMethod method, int total_steps, int budget) {
  detail::require_config(total_steps >= 1, "select_timesteps: T must be >= 1");
  detail::require_config(budget >= 1 && budget <= total_steps,
                         "select_timesteps: budget " + std::to_string(budget) + " outside [1, " +
                             std::to_string(total_steps) + "]");
  TimestepSubset s{method, total_steps, {}};
  const long long T = total_steps, b = budget;
  for (long long i = b; i >= 1; --i) {
    long long tau = method == SubsetMethod::linear ? (T * i) / b : (T * i * i) / (b * b);
    tau = std::clamp<long long>(tau, 1, T);
    if (!s.steps.empty() && s.steps.back() == tau) {
      throw ConfigError("select_timesteps: " + to_string(method) + " selection with T=" +
                        std::to_string(total_steps) + ", budget=" + std::to_string(budget) +
                        " collapses duplicate timesteps below the budget");
    }
    s.steps.push_back(static_cast<int>(tau));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Single-step update rules, given a noise prediction
// ---------------------------------------------------------------------------

/// Deterministic (sigma = 0) DDIM move from t to t_prev.
template <class T>
diff::Var<T> ddim_update(const diff::Var<T>& x_t, const diff::Var<T>& eps_hat, int t, int t_prev,
                         const NoiseSchedule& sched) {
  detail::require(t_prev <= t, "ddim_step: t_prev " + std::to_string(t_prev) + " > t " +
                                   std::to_string(t));
  if (t_prev == t) return x_t;
  const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
  auto x0_pred = diff::scale(diff::sub(x_t, diff::scale(eps_hat, static_cast<T>(std::sqrt(1.0 - ab)))),
                             static_cast<T>(1.0 / std::sqrt(ab)));
  return diff::add(diff::scale(x0_pred, static_cast<T>(std::sqrt(ab_prev))),
                   diff::scale(eps_hat, static_cast<T>(std::sqrt(1.0 - ab_prev))));
}

/// Ancestral move from t to t_prev with sigma^2 = 1 - alpha_bar_t/alpha_bar_prev,
/// which is beta_t when t_prev = t - 1.
template <class T>
diff::Var<T> ddpm_update(const diff::Var<T>& x_t, const diff::Var<T>& eps_hat, int t, int t_prev,
                         const NoiseSchedule& sched, const std::optional<diff::Var<T>>& noise) {
  detail::require(t >= 1 && t <= sched.steps(), "ddpm_step: t out of range");
  detail::require(t_prev >= 0 && t_prev < t, "ddpm_step: need 0 <= t_prev < t");
  const double ab = sched.alpha_bar(t);
  const double alpha = ab / sched.alpha_bar(t_prev);
  const double beta = 1.0 - alpha;
  auto mu = diff::scale(diff::sub(x_t, diff::scale(eps_hat, static_cast<T>(beta / std::sqrt(1.0 - ab)))),
                        static_cast<T>(1.0 / std::sqrt(alpha)));
  if (!noise) return mu;
  return diff::add(mu, diff::scale(*noise, static_cast<T>(std::sqrt(beta))));
}

// ---------------------------------------------------------------------------
// Steps with the network
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> ddim_step(const DenoiserParams<T>& params, const Tensor<T>& x_t, int t, int t_prev,
                    const NoiseSchedule& sched) {
  detail::require(t_prev <= t, "ddim_step: t_prev " + std::to_string(t_prev) + " > t " +
                                   std::to_string(t));
  if (t_prev == t) return x_t;
  diff::Tape<T> tape;
  auto w = place<T>(tape, params.tensors, false);
  auto x = tape.constant(x_t);
  std::vector<int> ts(x_t.rows(), t);
  auto eps = predict_noise<T>(params.spec, w, x, ts, sched.steps());
  return ddim_update(x, eps, t, t_prev, sched).value();
}

/// x_{t-1} from x_t; `noise` is the reparametrized Gaussian draw (ignored at t = 1).
template <class T>
Tensor<T> ddpm_step(const DenoiserParams<T>& params, const Tensor<T>& x_t, int t,
                    const NoiseSchedule& sched, const Tensor<T>& noise, int t_prev = -1) {
  if (t_prev < 0) t_prev = t - 1;
  detail::require(t >= 1 && t <= sched.steps(), "ddpm_step: t out of range");
  diff::Tape<T> tape;
  auto w = place<T>(tape, params.tensors, false);
  auto x = tape.constant(x_t);
  std::vector<int> ts(x_t.rows(), t);
  auto eps = predict_noise<T>(params.spec, w, x, ts, sched.steps());
  std::optional<diff::Var<T>> z;
  if (t_prev > 0) z = tape.constant(noise);
  return ddpm_update(x, eps, t, t_prev, sched, z).value();
}

// ---------------------------------------------------------------------------
// Chains
// ---------------------------------------------------------------------------

/// Exogenous randomness of one chain: the starting point and, for DDPM, one
/// noise tensor per step (the last one is never used and kept at zero).
template <class T>
struct ChainNoise {
  Tensor<T> x_T;
  std::vector<Tensor<T>> step_noise;
};

template <class T>
ChainNoise<T> draw_chain_noise(const TimestepSubset& subset, SamplerKind kind, std::size_t n,
                               std::size_t dim, Rng& rng) {
  ChainNoise<T> cn{randn<T>(n, dim, rng), {}};
  if (kind == SamplerKind::ddpm) {
    for (std::size_t i = 0; i < subset.budget(); ++i) {
      cn.step_noise.push_back(i + 1 < subset.budget() ? randn<T>(n, dim, rng)
                                                      : Tensor<T>::matrix(n, dim));
    }
  }
  return cn;
}

/// One reverse step on a tape. Inputs follow the segment layout
/// {x, weights..., [noise]}.
template <class T>
diff::Var<T> reverse_step(const DenoiserSpec& spec, std::span<const diff::Var<T>> weights,
                          const diff::Var<T>& x, const std::optional<diff::Var<T>>& noise,
                          SamplerKind kind, int t, int t_prev, const NoiseSchedule& sched) {
  std::vector<int> ts(x.rows(), t);
  auto eps = predict_noise<T>(spec, weights, x, ts, sched.steps());
  if (kind == SamplerKind::ddim) return ddim_update(x, eps, t, t_prev, sched);
  return ddpm_update(x, eps, t, t_prev, sched, t_prev > 0 ? noise : std::nullopt);
}

/// Full budgeted chain on `tape`, differentiable in the weights. With
/// `checkpointed`, every timestep is one checkpoint segment, so only the
/// per-step states stay resident.
template <class T>
diff::Var<T> chain_on_tape(const DenoiserSpec& spec, std::span<const diff::Var<T>> weights,
                           const TimestepSubset& subset, SamplerKind kind, const diff::Var<T>& x_T,
                           std::span<const diff::Var<T>> step_noise, const NoiseSchedule& sched,
                           bool checkpointed) {
  detail::require(kind == SamplerKind::ddim || step_noise.size() == subset.budget(),
                  "chain: DDPM needs one noise tensor per step");
  diff::Tape<T>& tape = x_T.tape();
  diff::Var<T> x = x_T;
  for (std::size_t i = 0; i < subset.budget(); ++i) {
    const int t = subset.steps[i], t_prev = subset.target(i);
    const bool has_noise = kind == SamplerKind::ddpm;
    if (!checkpointed) {
      std::optional<diff::Var<T>> z;
      if (has_noise) z = step_noise[i];
      x = reverse_step<T>(spec, weights, x, z, kind, t, t_prev, sched);
      continue;
    }
    std::vector<diff::Var<T>> inputs{x};
    inputs.insert(inputs.end(), weights.begin(), weights.end());
    if (has_noise) inputs.push_back(step_noise[i]);
    const std::size_t nw = weights.size();
    diff::Segment<T> seg = [spec, sched, kind, t, t_prev, nw, has_noise](
                               diff::Tape<T>&, std::span<const diff::Var<T>> in) {
      std::optional<diff::Var<T>> z;
      if (has_noise) z = in[1 + nw];
      return std::vector<diff::Var<T>>{
          reverse_step<T>(spec, in.subspan(1, nw), in[0], z, kind, t, t_prev, sched)};
    };
    x = diff::checkpoint<T>(tape, std::move(seg), inputs).front();
  }
  return x;
}

/// Gradient-free chain: one short-lived tape per step.
template <class T>
Tensor<T> run_chain(const DenoiserParams<T>& params, const TimestepSubset& subset, SamplerKind kind,
                    const ChainNoise<T>& noise, const NoiseSchedule& sched) {
  Tensor<T> x = noise.x_T;
  for (std::size_t i = 0; i < subset.budget(); ++i) {
    diff::Tape<T> tape;
    auto w = place<T>(tape, params.tensors, false);
    auto xv = tape.constant(std::move(x));
    std::optional<diff::Var<T>> z;
    if (kind == SamplerKind::ddpm) z = tape.constant(noise.step_noise.at(i));
    x = reverse_step<T>(params.spec, w, xv, z, kind, subset.steps[i], subset.target(i), sched)
            .value();
  }
  return x;
}

template <class T>
struct SampleBatch {
  Tensor<T> x0;
  ChainNoise<T> noise;
  TimestepSubset subset;
  SamplerKind kind = SamplerKind::ddim;
};

template <class T>
SampleBatch<T> sample_chain(const DenoiserParams<T>& params, const TimestepSubset& subset,
                            SamplerKind kind, std::size_t n, const NoiseSchedule& sched, Rng& rng) {
  detail::require(n >= 1, "sample_chain: n must be >= 1");
  SampleBatch<T> out;
  out.noise = draw_chain_noise<T>(subset, kind, n, params.spec.dim, rng);
  out.x0 = run_chain(params, subset, kind, out.noise, sched);
  out.subset = subset;
  out.kind = kind;
  return out;
}

}  // namespace mmdlab
