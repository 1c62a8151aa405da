// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <vector>

#include "mmdlab/diffcore.hpp"
#include "mmdlab/errors.hpp"
#include "mmdlab/rng.hpp"
#include "mmdlab/tensor.hpp"

namespace mmdlab {

enum class FeatureKind { identity, randproj, encoder };

inline std::string to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::identity: return "identity";
    case FeatureKind::randproj: return "randproj";
    case FeatureKind::encoder: return "encoder";
  }
  return "?";
}

inline FeatureKind parse_feature_kind(const std::string& s) {
  if (s == "identity") return FeatureKind::identity;
  if (s == "randproj") return FeatureKind::randproj;
  if (s == "encoder") return FeatureKind::encoder;
  throw ConfigError("unknown feature_map '" + s + "' (identity|randproj|encoder)");
}

/// Frozen embedding applied before kernel evaluation. Layers are (W, b)
/// pairs with SiLU between them; `activate_last` adds SiLU after the final one.
template <class T>
struct FeatureMap {
  FeatureKind kind = FeatureKind::identity;
  std::size_t in_dim = 2;
  std::size_t out_dim = 2;
  std::vector<Tensor<T>> layers;
  bool activate_last = false;

  std::uint64_t fingerprint() const { return checksum<T>(layers) ^ static_cast<std::uint64_t>(kind); }
};

template <class T>
FeatureMap<T> identity_features(std::size_t dim) {
  return FeatureMap<T>{FeatureKind::identity, dim, dim, {}, false};
}

/// silu(x W + b) with W ~ N(0, 1), b ~ N(0, 0.25), fixed by `seed`.
template <class T>
FeatureMap<T> random_projection(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x7270);
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> w = Tensor<T>::matrix(in_dim, out_dim);
  for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  Tensor<T> b = Tensor<T>::matrix(1, out_dim);
  for (auto& v : b.data()) v = static_cast<T>(0.5 * dist(rng));
  return FeatureMap<T>{FeatureKind::randproj, in_dim, out_dim, {std::move(w), std::move(b)}, true};
}

template <class T>
diff::Var<T> featurize(const FeatureMap<T>& map, const diff::Var<T>& x) {
  detail::require(x.value().rank() == 2 && x.cols() == map.in_dim,
                  "featurize: input has " + std::to_string(x.cols()) + " columns, map expects " +
                      std::to_string(map.in_dim));
  if (map.kind == FeatureKind::identity) return x;
  diff::Tape<T>& tape = x.tape();
  diff::Var<T> h = x;
  const std::size_t nl = map.layers.size() / 2;
  for (std::size_t k = 0; k < nl; ++k) {
    h = diff::add(diff::matmul(h, tape.constant(map.layers[2 * k])),
                  tape.constant(map.layers[2 * k + 1]));
    if (k + 1 < nl || map.activate_last) h = diff::silu(h);
  }
  return h;
}

template <class T>
Tensor<T> featurize(const FeatureMap<T>& map, const Tensor<T>& batch) {
  if (map.kind == FeatureKind::identity) {
    detail::require(batch.rank() == 2 && batch.cols() == map.in_dim, "featurize: dimension mismatch");
    return batch;
  }
  diff::Tape<T> tape;
  return featurize(map, tape.constant(batch)).value();
}

struct EncoderConfig {
  std::size_t hidden = 32;
  std::size_t features = 8;
  long iterations = 2000;
  std::size_t batch = 128;
  double input_noise = 0.1;
  double lr = 1e-3;
};

/// Small encoder trained as the front half of a denoising autoencoder on the
/// toy data, then frozen. Features are the bottleneck activations.
template <class T>
FeatureMap<T> train_encoder(const Tensor<T>& data, const EncoderConfig& cfg, Rng& rng) {
  detail::require(data.rank() == 2 && data.rows() > 0, "train_encoder: empty data");
  const std::size_t d = data.cols();
  std::normal_distribution<double> dist(0.0, 1.0);
  auto init = [&](std::size_t in, std::size_t out) {
    Tensor<T> w = Tensor<T>::matrix(in, out);
    for (auto& v : w.data()) v = static_cast<T>(dist(rng) / std::sqrt(static_cast<double>(in)));
    return w;
  };
  // encoder: d -> hidden -> features; decoder: features -> hidden -> d
  std::vector<Tensor<T>> p{init(d, cfg.hidden),        Tensor<T>::matrix(1, cfg.hidden),
                           init(cfg.hidden, cfg.features), Tensor<T>::matrix(1, cfg.features),
                           init(cfg.features, cfg.hidden), Tensor<T>::matrix(1, cfg.hidden),
                           init(cfg.hidden, d),            Tensor<T>::matrix(1, d)};
  auto state = diff::AdamState<T>::init(diff::AdamConfig{cfg.lr}, p);
  std::uniform_int_distribution<std::size_t> pick(0, data.rows() - 1);
  std::vector<std::size_t> idx(cfg.batch);
  for (long it = 0; it < cfg.iterations; ++it) {
    for (auto& i : idx) i = pick(rng);
    Tensor<T> clean = gather_rows(data, std::span<const std::size_t>(idx));
    Tensor<T> noisy = clean;
    for (auto& v : noisy.data()) v += static_cast<T>(cfg.input_noise * dist(rng));
    diff::Tape<T> tape;
    std::vector<diff::Var<T>> w;
    for (const auto& t : p) w.push_back(tape.leaf(t));
    diff::Var<T> h = tape.constant(noisy);
    for (std::size_t k = 0; k < 4; ++k) {
      h = diff::add(diff::matmul(h, w[2 * k]), w[2 * k + 1]);
      if (k != 3) h = diff::silu(h);
    }
    auto err = diff::sub(h, tape.constant(clean));
    auto loss = diff::mean(diff::mul(err, err));
    auto g = diff::grad<T>(tape, loss, w);
    diff::adam_step<T>(p, g, state);
  }
  FeatureMap<T> map{FeatureKind::encoder, d, cfg.features, {p[0], p[1], p[2], p[3]}, true};
  return map;
}

}  // namespace mmdlab
