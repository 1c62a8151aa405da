// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mmdlab/denoiser.hpp"
#include "mmdlab/errors.hpp"
#include "mmdlab/features.hpp"
#include "mmdlab/mmd.hpp"
#include "mmdlab/rng.hpp"
#include "mmdlab/sampler.hpp"
#include "mmdlab/schedule.hpp"

namespace mmdlab {

struct MetricReport {
  std::string metric;
  double value = 0.0;
  double std = 0.0;
  int reps = 1;
  std::string fingerprint;
  std::string note;
};

inline MetricReport summarize(std::string metric, const std::vector<double>& values,
                              std::string fingerprint = {}) {
  detail::require(!values.empty(), "summarize: no repetitions");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return MetricReport{std::move(metric), mean, sd, static_cast<int>(values.size()),
                      std::move(fingerprint), {}};
}

/// Draw n rows without replacement.
template <class T>
Tensor<T> subsample_rows(const Tensor<T>& pool, std::size_t n, Rng& rng) {
  detail::require_config(pool.rows() >= n, "held-out pool has " + std::to_string(pool.rows()) +
                                               " rows, need " + std::to_string(n));
  std::vector<std::size_t> idx(pool.rows());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  return gather_rows(pool, std::span<const std::size_t>(idx));
}

/// reps x (generate n, draw n held-out rows, full unbiased MMD^2 in feature space).
template <class T>
MetricReport heldout_mmd2(const DenoiserParams<T>& params, const TimestepSubset& subset,
                          SamplerKind kind, const Tensor<T>& heldout, const KernelSpec& kernel,
                          const FeatureMap<T>& features, std::size_t n, int reps,
                          const NoiseSchedule& sched, Rng& rng) {
  detail::require_config(reps >= 1, "heldout_mmd2: reps must be >= 1");
  detail::require_config(heldout.rows() >= n, "heldout_mmd2: held-out pool (" +
                                                  std::to_string(heldout.rows()) +
                                                  ") smaller than N (" + std::to_string(n) + ")");
  std::vector<double> values;
  for (int r = 0; r < reps; ++r) {
    const Tensor<T> gen = sample_chain(params, subset, kind, n, sched, rng).x0;
    const Tensor<T> real = subsample_rows(heldout, n, rng);
    values.push_back(
        mmd2_unbiased(featurize(features, gen), featurize(features, real), kernel, true).value);
  }
  return summarize("heldout_mmd2", values,
                   to_string(kernel.kind) + "/" + to_string(features.kind) + "/b" +
                       std::to_string(subset.budget()) + "/" + to_string(kind));
}

/// Same statistic with a fixed generated batch (e.g. held-out data itself).
template <class T>
MetricReport heldout_mmd2_of(const Tensor<T>& generated, const Tensor<T>& heldout,
                             const KernelSpec& kernel, const FeatureMap<T>& features, int reps,
                             Rng& rng) {
  detail::require_config(reps >= 1, "heldout_mmd2: reps must be >= 1");
  std::vector<double> values;
  for (int r = 0; r < reps; ++r) {
    const Tensor<T> real = subsample_rows(heldout, generated.rows(), rng);
    values.push_back(
        mmd2_unbiased(featurize(features, generated), featurize(features, real), kernel, true).value);
  }
  return summarize("heldout_mmd2", values);
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian fits
// ---------------------------------------------------------------------------

struct FrechetResult {
  double value = 0.0;
  bool regularized = false;  // 1e-10 added to covariance diagonals
};

namespace detail {
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace detail

/// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}). The cross term uses
/// tr((S1 S2)^{1/2}) = tr((A S2 A)^{1/2}) with A = S1^{1/2}, whose argument is
/// symmetric, so both roots come from symmetric eigendecompositions.
inline FrechetResult frechet_gaussian(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& cov1,
                                      const Eigen::VectorXd& mu2, const Eigen::MatrixXd& cov2) {
  mmdlab::detail::require(mu1.size() == mu2.size() && cov1.rows() == mu1.size() &&
                              cov2.rows() == mu2.size(),
                          "frechet: dimension mismatch");
  FrechetResult out;
  Eigen::MatrixXd s1 = 0.5 * (cov1 + cov1.transpose());
  Eigen::MatrixXd s2 = 0.5 * (cov2 + cov2.transpose());
  auto min_eig = [](const Eigen::MatrixXd& m) {
    return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m, Eigen::EigenvaluesOnly)
        .eigenvalues()
        .minCoeff();
  };
  if (min_eig(s1) <= 0.0 || min_eig(s2) <= 0.0) {
    const auto eye = Eigen::MatrixXd::Identity(s1.rows(), s1.cols());
    s1 += 1e-10 * eye;
    s2 += 1e-10 * eye;
    out.regularized = true;
  }
  const Eigen::MatrixXd a = detail::psd_sqrt(s1);
  Eigen::MatrixXd inner = a * s2 * a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double tr_cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  out.value = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_cross;
  return out;
}

template <class T>
FrechetResult frechet_feature_distance(const Tensor<T>& fx, const Tensor<T>& fy) {
  detail::require(fx.rows() >= 2 && fy.rows() >= 2, "frechet: need at least 2 rows per batch");
  detail::require(fx.cols() == fy.cols(), "frechet: feature dimension mismatch");
  auto fit = [](const Tensor<T>& f) {
    Eigen::MatrixXd m(f.rows(), f.cols());
    for (std::size_t i = 0; i < f.rows(); ++i) {
      for (std::size_t j = 0; j < f.cols(); ++j) m(i, j) = static_cast<double>(f(i, j));
    }
    Eigen::VectorXd mu = m.colwise().mean();
    Eigen::MatrixXd c = m.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(f.rows() - 1);
    return std::pair{mu, cov};
  };
  auto [m1, c1] = fit(fx);
  auto [m2, c2] = fit(fy);
  return frechet_gaussian(m1, c1, m2, c2);
}

// ---------------------------------------------------------------------------
// k-NN precision / recall
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
double sq_dist(std::span<const T> a, std::span<const T> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    s += d * d;
  }
  return s;
}

/// Squared distance of every point to its k-th nearest neighbour in the same set.
template <class T>
std::vector<double> knn_radii_sq(const Tensor<T>& pts, std::size_t k) {
  const std::size_t n = pts.rows();
  std::vector<double> radii(n), d(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t m = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) d[m++] = sq_dist(pts.row(i), pts.row(j));
    }
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.end());
    radii[i] = d[k - 1];
  }
  return radii;
}

template <class T>
double coverage(const Tensor<T>& queries, const Tensor<T>& manifold, const std::vector<double>& radii) {
  std::size_t inside = 0;
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    for (std::size_t j = 0; j < manifold.rows(); ++j) {
      if (sq_dist(queries.row(i), manifold.row(j)) <= radii[j]) {
        ++inside;
        break;
      }
    }
  }
  return static_cast<double>(inside) / static_cast<double>(queries.rows());
}
}  // namespace detail

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

/// Manifolds are unions of balls reaching each point's k-th nearest neighbour.
/// precision: generated points inside the real manifold; recall: the reverse.
template <class T>
PrecisionRecall knn_precision_recall(const Tensor<T>& real, const Tensor<T>& gen, std::size_t k) {
  detail::require_config(k >= 1, "knn_precision_recall: k must be >= 1");
  detail::require_config(k < real.rows() && k < gen.rows(),
                         "knn_precision_recall: k must be smaller than both set sizes");
  detail::require(real.cols() == gen.cols(), "knn_precision_recall: dimension mismatch");
  const auto rr = detail::knn_radii_sq(real, k);
  const auto rg = detail::knn_radii_sq(gen, k);
  return {detail::coverage(gen, real, rr), detail::coverage(real, gen, rg)};
}

// ---------------------------------------------------------------------------
// Nearest-neighbour audit
// ---------------------------------------------------------------------------

struct NeighborTable {
  std::vector<std::vector<std::size_t>> indices;
  std::vector<std::vector<double>> distances;  // ascending per row
};

/// Exact top-K Euclidean neighbours in feature space; ties broken by index.
template <class T>
NeighborTable nn_audit(const Tensor<T>& gen, const Tensor<T>& train, std::size_t k,
                       const FeatureMap<T>& features) {
  detail::require(k >= 1 && k <= train.rows(), "nn_audit: need 1 <= K <= |train|");
  const Tensor<T> fg = featurize(features, gen);
  const Tensor<T> ft = featurize(features, train);
  NeighborTable table;
  std::vector<std::pair<double, std::size_t>> d(ft.rows());
  for (std::size_t i = 0; i < fg.rows(); ++i) {
    for (std::size_t j = 0; j < ft.rows(); ++j) d[j] = {detail::sq_dist(fg.row(i), ft.row(j)), j};
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    std::vector<std::size_t> idx(k);
    std::vector<double> dist(k);
    for (std::size_t r = 0; r < k; ++r) {
      idx[r] = d[r].second;
      dist[r] = std::sqrt(d[r].first);
    }
    table.indices.push_back(std::move(idx));
    table.distances.push_back(std::move(dist));
  }
  return table;
}

inline double mean_nearest_distance(const NeighborTable& t) {
  double s = 0.0;
  for (const auto& row : t.distances) s += row.front();
  return s / static_cast<double>(t.distances.size());
}

// ---------------------------------------------------------------------------
// Spherical interpolation
// ---------------------------------------------------------------------------

inline std::vector<double> slerp(std::span<const double> x0, std::span<const double> x1, double alpha) {
  detail::require(x0.size() == x1.size(), "slerp: dimension mismatch");
  detail::require(alpha >= 0.0 && alpha <= 1.0, "slerp: alpha outside [0,1]");
  double dot = 0.0, n0 = 0.0, n1 = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    dot += x0[i] * x1[i];
    n0 += x0[i] * x0[i];
    n1 += x1[i] * x1[i];
  }
  detail::require(n0 > 0.0 && n1 > 0.0, "slerp: zero-norm input");
  const double theta = std::acos(std::clamp(dot / std::sqrt(n0 * n1), -1.0, 1.0));
  std::vector<double> out(x0.size());
  if (theta < 1e-6) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - alpha) * x0[i] + alpha * x1[i];
    return out;
  }
  const double s = std::sin(theta);
  const double a = std::sin((1.0 - alpha) * theta) / s;
  const double b = std::sin(alpha * theta) / s;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * x1[i];
  return out;
}

}  // namespace mmdlab
