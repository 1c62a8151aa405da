// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Kernels and the unbiased squared-MMD estimator
//
//   1/(N(N-1)) sum_{i!=j} k(x_i,x_j) - 2/N^2 sum_{i,j} k(x_i,y_j) + c
//
// where c is either dropped (optimizer form: it does not depend on the
// generator) or materialized as 1/(N(N-1)) sum_{i!=j} k(y_i,y_j).

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmdlab/diffcore.hpp"
#include "mmdlab/errors.hpp"
#include "mmdlab/tensor.hpp"

namespace mmdlab {

enum class KernelKind { linear, cubic, rbf };

inline std::string to_string(KernelKind k) {
  switch (k) {
    case KernelKind::linear: return "linear";
    case KernelKind::cubic: return "cubic";
    case KernelKind::rbf: return "rbf";
  }
  return "?";
}

inline KernelKind parse_kernel_kind(const std::string& s) {
  if (s == "linear") return KernelKind::linear;
  if (s == "cubic") return KernelKind::cubic;
  if (s == "rbf") return KernelKind::rbf;
  throw ConfigError("unknown kernel '" + s + "' (linear|cubic|rbf)");
}

struct KernelSpec {
  KernelKind kind = KernelKind::cubic;
  /// RBF bandwidth; empty selects the median heuristic.
  std::optional<double> sigma;
  /// Dimension for the cubic 1/d scaling; 0 uses the feature width.
  std::size_t dim = 0;

  void validate() const {
    if (kind == KernelKind::rbf && sigma) {
      detail::require_config(*sigma > 0.0, "kernel: rbf_sigma must be positive");
    }
  }
};

inline double kernel_eval(const KernelSpec& spec, std::span<const double> u, std::span<const double> v,
                          double sigma = 1.0) {
  detail::require(u.size() == v.size(), "kernel_eval: dimension mismatch");
  switch (spec.kind) {
    case KernelKind::linear: {
      double s = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
      return s;
    }
    case KernelKind::cubic: {
      double s = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
      const double d = static_cast<double>(spec.dim ? spec.dim : u.size());
      const double b = s / d + 1.0;
      return b * b * b;
    }
    case KernelKind::rbf: {
      double s = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) s += (u[i] - v[i]) * (u[i] - v[i]);
      const double bw = spec.sigma.value_or(sigma);
      return std::exp(-s / (2.0 * bw * bw));
    }
  }
  return 0.0;
}

/// sigma with sigma^2 = median(pairwise squared distances over fx ++ fy) / 2.
template <class T>
double median_heuristic_sigma(const Tensor<T>& fx, const Tensor<T>& fy) {
  detail::require(fx.cols() == fy.cols(), "median heuristic: dimension mismatch");
  const std::size_t n = fx.rows() + fy.rows(), d = fx.cols();
  auto row = [&](std::size_t i) { return i < fx.rows() ? fx.row(i) : fy.row(i - fx.rows()); };
  std::vector<double> dist;
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    auto a = row(i);
    for (std::size_t j = i + 1; j < n; ++j) {
      auto b = row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = static_cast<double>(a[k]) - static_cast<double>(b[k]);
        s += diff * diff;
      }
      dist.push_back(s);
    }
  }
  detail::require(!dist.empty(), "median heuristic: need at least two points");
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + mid, dist.end());
  double med = dist[mid];
  if (dist.size() % 2 == 0) {
    med = 0.5 * (med + *std::max_element(dist.begin(), dist.begin() + mid));
  }
  detail::require(med > 0.0, "median heuristic: all points coincide");
  return std::sqrt(med / 2.0);
}

template <class T>
double resolve_sigma(const KernelSpec& spec, const Tensor<T>& fx, const Tensor<T>& fy) {
  if (spec.kind != KernelKind::rbf) return 1.0;
  return spec.sigma ? *spec.sigma : median_heuristic_sigma(fx, fy);
}

/// Gram matrix k(x_i, y_j) on a tape, shape [rows(x), rows(y)].
template <class T>
diff::Var<T> gram(const KernelSpec& spec, const diff::Var<T>& x, const diff::Var<T>& y, double sigma) {
  detail::require(x.cols() == y.cols(), "gram: feature dimension mismatch");
  auto xy = diff::matmul(x, diff::transpose(y));
  switch (spec.kind) {
    case KernelKind::linear:
      return xy;
    case KernelKind::cubic: {
      const double d = static_cast<double>(spec.dim ? spec.dim : x.cols());
      return diff::pow(diff::add_scalar(diff::scale(xy, static_cast<T>(1.0 / d)), T(1)), T(3));
    }
    case KernelKind::rbf: {
      auto nx = diff::row_sum(diff::mul(x, x));
      auto ny = diff::transpose(diff::row_sum(diff::mul(y, y)));
      auto sq = diff::sub(diff::add(nx, ny), diff::scale(xy, T(2)));
      return diff::exp(diff::scale(sq, static_cast<T>(-1.0 / (2.0 * sigma * sigma))));
    }
  }
  throw ContractViolation("gram: unknown kernel");
}

namespace detail {
template <class T>
Tensor<T> off_diagonal_mask(std::size_t n) {
  Tensor<T> m = Tensor<T>::matrix(n, n, T(1));
  for (std::size_t i = 0; i < n; ++i) m(i, i) = T(0);
  return m;
}
}  // namespace detail

/// Differentiable estimator; gradients flow through `fx` only when `fy` is a
/// constant. `sigma` is the resolved RBF bandwidth (ignored otherwise).
template <class T>
diff::Var<T> mmd2_unbiased(const diff::Var<T>& fx, const diff::Var<T>& fy, const KernelSpec& spec,
                           bool include_constant, double sigma) {
  const std::size_t n = fx.rows();
  if (n < 2 || fy.rows() < 2) throw EstimatorUndefined("mmd2_unbiased: need N >= 2 samples");
  detail::require(fy.rows() == n, "mmd2_unbiased: generated and real batches must have equal size");
  diff::Tape<T>& tape = fx.tape();
  const T nn1 = static_cast<T>(1.0 / (static_cast<double>(n) * static_cast<double>(n - 1)));
  const T cross = static_cast<T>(2.0 / (static_cast<double>(n) * static_cast<double>(n)));
  auto mask = tape.constant(detail::off_diagonal_mask<T>(n));
  auto kxx = gram(spec, fx, fx, sigma);
  auto kxy = gram(spec, fx, fy, sigma);
  auto loss = diff::sub(diff::scale(diff::sum(diff::mul(kxx, mask)), nn1),
                        diff::scale(diff::sum(kxy), cross));
  if (include_constant) {
    auto kyy = gram(spec, fy, fy, sigma);
    loss = diff::add(loss, diff::scale(diff::sum(diff::mul(kyy, mask)), nn1));
  }
  return loss;
}

struct MMDEstimate {
  double value = 0.0;
  std::size_t n = 0;
  KernelSpec kernel;
  double sigma = 1.0;
  bool include_constant = true;
};

namespace detail {
inline Eigen::MatrixXd to_double(const auto& f) {
  Eigen::MatrixXd m(f.rows(), f.cols());
  for (std::size_t i = 0; i < f.rows(); ++i) {
    for (std::size_t j = 0; j < f.cols(); ++j) m(i, j) = static_cast<double>(f(i, j));
  }
  return m;
}

/// Sum of k(a_i, b_j) over all pairs, skipping i == j when `skip_diag`.
/// Works in row blocks so the full Gram matrix is never held.
inline double kernel_sum(const KernelSpec& spec, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                         bool skip_diag, double sigma) {
  const Eigen::Index n = a.rows(), m = b.rows(), block = 256;
  const double d = static_cast<double>(spec.dim ? spec.dim : a.cols());
  const Eigen::RowVectorXd bn = b.rowwise().squaredNorm().transpose();
  const double bw = spec.sigma.value_or(sigma);
  double total = 0.0;
  for (Eigen::Index r0 = 0; r0 < n; r0 += block) {
    const Eigen::Index rows = std::min(block, n - r0);
    Eigen::MatrixXd g = a.middleRows(r0, rows) * b.transpose();
    if (spec.kind == KernelKind::cubic) {
      g = (g.array() / d + 1.0).cube().matrix();
    } else if (spec.kind == KernelKind::rbf) {
      const Eigen::VectorXd an = a.middleRows(r0, rows).rowwise().squaredNorm();
      Eigen::MatrixXd sq = -2.0 * g;
      sq.colwise() += an;
      sq.rowwise() += bn;
      g = (-sq.array().max(0.0) / (2.0 * bw * bw)).exp().matrix();
    }
    if (skip_diag) {
      for (Eigen::Index i = 0; i < rows && r0 + i < m; ++i) g(i, r0 + i) = 0.0;
    }
    total += g.sum();
  }
  return total;
}
}  // namespace detail

/// Evaluation form, accumulated in double precision.
template <class T>
MMDEstimate mmd2_unbiased(const Tensor<T>& fx, const Tensor<T>& fy, const KernelSpec& spec,
                          bool include_constant = true) {
  const std::size_t n = fx.rows();
  if (n < 2 || fy.rows() < 2) throw EstimatorUndefined("mmd2_unbiased: need N >= 2 samples");
  detail::require(fy.rows() == n, "mmd2_unbiased: generated and real batches must have equal size");
  detail::require(fx.cols() == fy.cols(), "mmd2_unbiased: feature dimension mismatch");
  spec.validate();
  const double sigma = resolve_sigma(spec, fx, fy);
  const Eigen::MatrixXd x = detail::to_double(fx), y = detail::to_double(fy);
  const double nd = static_cast<double>(n);
  double value = detail::kernel_sum(spec, x, x, true, sigma) / (nd * (nd - 1.0)) -
                 2.0 * detail::kernel_sum(spec, x, y, false, sigma) / (nd * nd);
  if (include_constant) value += detail::kernel_sum(spec, y, y, true, sigma) / (nd * (nd - 1.0));
  return MMDEstimate{value, n, spec, sigma, include_constant};
}

}  // namespace mmdlab
