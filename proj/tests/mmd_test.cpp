// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mmdlab/mmd.hpp"
#include "mmdlab/rng.hpp"
#include "support/finite_diff.hpp"

namespace mmdlab {
namespace {

const KernelSpec kLinear{KernelKind::linear, std::nullopt, 0};
const KernelSpec kCubic{KernelKind::cubic, std::nullopt, 0};
KernelSpec rbf(double s) { return KernelSpec{KernelKind::rbf, s, 0}; }

// Independent O(N^2) double-sum reference for Eq. (7) with the constant.
double reference_mmd2(const Tensor<double>& x, const Tensor<double>& y, const KernelSpec& spec,
                      double sigma) {
  const std::size_t n = x.rows();
  auto k = [&](const Tensor<double>& a, std::size_t i, const Tensor<double>& b, std::size_t j) {
    std::vector<double> u(a.row(i).begin(), a.row(i).end()), v(b.row(j).begin(), b.row(j).end());
    return kernel_eval(spec, u, v, sigma);
  };
  double xx = 0, xy = 0, yy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) {
        xx += k(x, i, x, j);
        yy += k(y, i, y, j);
      }
      xy += k(x, i, y, j);
    }
  }
  const double nd = static_cast<double>(n);
  return xx / (nd * (nd - 1)) - 2.0 * xy / (nd * nd) + yy / (nd * (nd - 1));
}

TEST(KernelEval, Examples) {
  const std::vector<double> zero{0, 0}, ones{1, 1};
  EXPECT_EQ(kernel_eval(kCubic, zero, zero), 1.0);
  EXPECT_EQ(kernel_eval(kCubic, ones, ones), 8.0);
  const std::vector<double> u{1, 0}, v{0, 1};
  EXPECT_NEAR(kernel_eval(rbf(1.0), u, v), 0.36787944117144233, 1e-15);
  EXPECT_EQ(kernel_eval(kLinear, ones, std::vector<double>{2, -5}), -3.0);
}

TEST(KernelEval, DimensionMismatch) {
  EXPECT_THROW(kernel_eval(kLinear, std::vector<double>{1}, std::vector<double>{1, 2}),
               ContractViolation);
}

TEST(KernelEval, SymmetricAndBounded) {
  Rng rng = make_rng(1);
  for (int rep = 0; rep < 200; ++rep) {
    auto a = randn<double>(1, 3, rng), b = randn<double>(1, 3, rng);
    for (const auto& spec : {kLinear, kCubic, rbf(0.7)}) {
      EXPECT_EQ(kernel_eval(spec, a.row(0), b.row(0)), kernel_eval(spec, b.row(0), a.row(0)));
    }
    const double r = kernel_eval(rbf(0.7), a.row(0), b.row(0));
    EXPECT_GT(r, 0.0);
    EXPECT_LE(r, 1.0);
    double sq = 0;
    for (double x : a.data()) sq += x * x;
    EXPECT_DOUBLE_EQ(kernel_eval(kCubic, a.row(0), a.row(0)), std::pow(sq / 3.0 + 1.0, 3));
    EXPECT_GE(kernel_eval(kCubic, a.row(0), a.row(0)), 1.0);
  }
}

TEST(Mmd2Unbiased, LinearHandExample) {
  auto fx = Tensor<double>::matrix(2, 2, {1, 0, 0, 1});
  auto fy = Tensor<double>::matrix(2, 2, {0, 0, 1, 1});
  const double oracle = reference_mmd2(fx, fy, kLinear, 1.0);
  EXPECT_DOUBLE_EQ(mmd2_unbiased(fx, fy, kLinear).value, oracle);
  EXPECT_DOUBLE_EQ(oracle, -1.0);  // frozen
}

TEST(Mmd2Unbiased, MatchesReferenceForEveryKernel) {
  Rng rng = make_rng(2);
  auto fx = randn<double>(17, 3, rng), fy = randn<double>(17, 3, rng);
  for (const auto& spec : {kLinear, kCubic, rbf(0.8)}) {
    EXPECT_NEAR(mmd2_unbiased(fx, fy, spec).value, reference_mmd2(fx, fy, spec, 0.8), 1e-12);
  }
  KernelSpec median{KernelKind::rbf, std::nullopt, 0};
  const auto est = mmd2_unbiased(fx, fy, median);
  EXPECT_NEAR(est.value, reference_mmd2(fx, fy, median, est.sigma), 1e-12);
}

TEST(Mmd2Unbiased, TapeFormAgreesWithEvaluationForm) {
  Rng rng = make_rng(3);
  auto fx = randn<double>(9, 2, rng), fy = randn<double>(9, 2, rng);
  for (const auto& spec : {kLinear, kCubic, rbf(1.3)}) {
    diff::Tape<double> tape;
    const double sigma = resolve_sigma(spec, fx, fy);
    auto full = mmd2_unbiased(tape.constant(fx), tape.constant(fy), spec, true, sigma);
    EXPECT_NEAR(full.value().item(), mmd2_unbiased(fx, fy, spec).value, 1e-12);
    auto opt = mmd2_unbiased(tape.constant(fx), tape.constant(fy), spec, false, sigma);
    EXPECT_NEAR(opt.value().item(), mmd2_unbiased(fx, fy, spec, false).value, 1e-12);
  }
}

TEST(Mmd2Unbiased, GradientMatchesFiniteDifferences) {
  Rng rng = make_rng(4);
  const std::vector<Tensor<double>> x0{randn<double>(6, 2, rng)};
  const auto fy = randn<double>(6, 2, rng);
  for (const auto& spec : {kLinear, kCubic, rbf(0.9)}) {
    auto f = [&](const std::vector<Tensor<double>>& xs) {
      diff::Tape<double> t;
      return mmd2_unbiased(t.constant(xs[0]), t.constant(fy), spec, false, 0.9).value().item();
    };
    diff::Tape<double> tape;
    auto fx = tape.leaf(x0[0]);
    auto loss = mmd2_unbiased(fx, tape.constant(fy), spec, false, 0.9);
    const diff::Var<double> wrt[] = {fx};
    auto analytic = diff::grad<double>(tape, loss, wrt);
    EXPECT_LT(testing::max_relative_error(analytic, testing::central_differences(x0, f)), 1e-5)
        << to_string(spec.kind);
  }
}

TEST(Mmd2Unbiased, ConstantTermCarriesNoGradient) {
  Rng rng = make_rng(5);
  auto x = randn<double>(5, 2, rng), y = randn<double>(5, 2, rng);
  auto grads = [&](bool with_constant) {
    diff::Tape<double> tape;
    auto fx = tape.leaf(x);
    auto loss = mmd2_unbiased(fx, tape.constant(y), kCubic, with_constant, 1.0);
    const diff::Var<double> wrt[] = {fx};
    return diff::grad<double>(tape, loss, wrt)[0];
  };
  auto a = grads(true), b = grads(false);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Mmd2Unbiased, PermutationInvariant) {
  Rng rng = make_rng(6);
  auto fx = randn<double>(12, 2, rng), fy = randn<double>(12, 2, rng);
  std::vector<std::size_t> p(12), q(12);
  std::iota(p.begin(), p.end(), 0);
  std::iota(q.begin(), q.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  std::shuffle(q.begin(), q.end(), rng);
  auto px = gather_rows(fx, std::span<const std::size_t>(p));
  auto qy = gather_rows(fy, std::span<const std::size_t>(q));
  for (const auto& spec : {kLinear, kCubic, rbf(1.0)}) {
    EXPECT_NEAR(mmd2_unbiased(fx, fy, spec).value, mmd2_unbiased(px, qy, spec).value, 1e-13);
  }
}

TEST(Mmd2Unbiased, Errors) {
  auto one = Tensor<double>::matrix(1, 2);
  EXPECT_THROW(mmd2_unbiased(one, one, kCubic), EstimatorUndefined);
  diff::Tape<double> tape;
  EXPECT_THROW(mmd2_unbiased(tape.constant(one), tape.constant(one), kCubic, false, 1.0),
               EstimatorUndefined);
  EXPECT_THROW(mmd2_unbiased(Tensor<double>::matrix(3, 2), Tensor<double>::matrix(4, 2), kCubic),
               ContractViolation);
  EXPECT_THROW(mmd2_unbiased(Tensor<double>::matrix(3, 2), Tensor<double>::matrix(3, 2), rbf(-1.0)),
               ConfigError);
}

TEST(Mmd2Unbiased, UnbiasedUnderNull) {
  Rng rng = make_rng(7);
  const int reps = 2000;
  std::vector<double> v;
  for (int r = 0; r < reps; ++r) {
    v.push_back(mmd2_unbiased(randn<double>(64, 2, rng), randn<double>(64, 2, rng), rbf(1.0)).value);
  }
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / reps;
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double se = std::sqrt(ss / (reps - 1) / reps);
  EXPECT_LE(std::abs(mean), 3.0 * se);
}

TEST(Mmd2Unbiased, LinearKernelRecoversMeanShift) {
  Rng rng = make_rng(8);
  const int reps = 500;
  double total = 0;
  for (int r = 0; r < reps; ++r) {
    auto y = randn<double>(128, 2, rng);
    for (std::size_t i = 0; i < 128; ++i) y(i, 0) += 1.0;
    total += mmd2_unbiased(randn<double>(128, 2, rng), y, kLinear).value;
  }
  EXPECT_NEAR(total / reps, 1.0, 0.05);
}

TEST(MedianHeuristic, HandInstance) {
  // pairwise squared distances 1, 9, 4 -> median 4 -> sigma^2 = 2
  auto fx = Tensor<double>::matrix(2, 2, {0, 0, 1, 0});
  auto fy = Tensor<double>::matrix(1, 2, {3, 0});
  EXPECT_DOUBLE_EQ(median_heuristic_sigma(fx, fy), std::sqrt(2.0));
  EXPECT_EQ(median_heuristic_sigma(fx, fy), median_heuristic_sigma(fx, fy));
}

TEST(MedianHeuristic, EvenCountAveragesMiddlePair) {
  // four points on a line: distances 1,4,9,1,4,1 -> sorted 1,1,1,4,4,9 -> median 2.5
  auto fx = Tensor<double>::matrix(2, 1, {0, 1});
  auto fy = Tensor<double>::matrix(2, 1, {2, 3});
  EXPECT_DOUBLE_EQ(median_heuristic_sigma(fx, fy), std::sqrt(1.25));
}

TEST(KernelNames, Parse) {
  EXPECT_EQ(parse_kernel_kind("rbf"), KernelKind::rbf);
  EXPECT_THROW(parse_kernel_kind("gauss"), ConfigError);
}

}  // namespace
}  // namespace mmdlab
