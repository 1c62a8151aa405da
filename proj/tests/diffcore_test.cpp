// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mmdlab/diffcore.hpp"
#include "mmdlab/rng.hpp"
#include "support/finite_diff.hpp"

namespace mmdlab {
namespace {

using diff::Tape;
using diff::Var;
using testing::central_differences;
using testing::max_relative_error;

TEST(Grad, Square) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(3.0));
  auto y = diff::mul(x, x);
  const Var<double> wrt[] = {x};
  EXPECT_DOUBLE_EQ(diff::grad<double>(tape, y, wrt)[0].item(), 6.0);
}

TEST(Grad, SumRule) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::matrix(1, 4, {0.5, -1.0, 2.0, 7.0}));
  const Var<double> wrt[] = {x};
  auto g = diff::grad<double>(tape, diff::sum(x), wrt)[0];
  EXPECT_EQ(g, Tensor<double>::matrix(1, 4, {1.0, 1.0, 1.0, 1.0}));
}

TEST(Grad, NonScalarOutputIsContractViolation) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::matrix(2, 2, 1.0));
  const Var<double> wrt[] = {x};
  EXPECT_THROW(diff::grad<double>(tape, x, wrt), ContractViolation);
}

TEST(Grad, UnreachableLeafGetsZeros) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::matrix(1, 2, {1.0, 2.0}));
  auto unused = tape.leaf(Tensor<double>::matrix(3, 1, 5.0));
  const Var<double> wrt[] = {x, unused};
  auto g = diff::grad<double>(tape, diff::sum(diff::mul(x, x)), wrt);
  EXPECT_EQ(g[1], Tensor<double>::matrix(3, 1, 0.0));
}

TEST(Tape, NonFiniteOpThrows) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(-1.0));
  EXPECT_THROW(diff::sqrt(x), NonFiniteError);
}

// Every differentiable op against central differences on random inputs.
class OpGradient : public ::testing::TestWithParam<int> {};

Var<double> build_op(int op, Tape<double>& tape, const std::vector<Var<double>>& in) {
  const Var<double>& a = in[0];
  const Var<double>& b = in[1];
  Var<double> y;
  switch (op) {
    case 0: y = diff::add(a, b); break;
    case 1: y = diff::sub(a, b); break;
    case 2: y = diff::mul(a, b); break;
    case 3: y = diff::matmul(a, diff::transpose(b)); break;
    case 4: y = diff::add_scalar(diff::scale(a, 1.7), -0.3); break;
    case 5: y = diff::pow(diff::add_scalar(diff::mul(a, a), 0.5), 3.0); break;
    case 6: y = diff::exp(a); break;
    case 7: y = diff::sqrt(diff::add_scalar(diff::mul(a, a), 1.0)); break;
    case 8: y = diff::sin(a); break;
    case 9: y = diff::cos(a); break;
    case 10: y = diff::silu(a); break;
    case 11: y = diff::mean(diff::mul(a, a)); break;
    case 12: y = diff::concat_cols(a, b); break;
    case 13: y = diff::row_sum(diff::mul(a, b)); break;
    case 14: y = diff::add(a, diff::row_sum(b)); break;  // column broadcast
    default: y = diff::mul(a, diff::transpose(diff::row_sum(diff::transpose(b)))); break;  // row broadcast
  }
  // Weighted sum so every output coordinate matters differently.
  Tensor<double> w(y.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
  return diff::sum(diff::mul(y, tape.constant(w)));
}

TEST_P(OpGradient, MatchesCentralDifferences) {
  const int op = GetParam();
  Rng rng = make_rng(100 + op);
  std::vector<Tensor<double>> inputs{randn<double>(3, 4, rng), randn<double>(3, 4, rng)};

  Tape<double> tape;
  std::vector<Var<double>> leaves{tape.leaf(inputs[0]), tape.leaf(inputs[1])};
  auto out = build_op(op, tape, leaves);
  auto analytic = diff::grad<double>(tape, out, leaves);

  auto f = [op](const std::vector<Tensor<double>>& xs) {
    Tape<double> t;
    std::vector<Var<double>> in{t.constant(xs[0]), t.constant(xs[1])};
    return build_op(op, t, in).value().item();
  };
  auto numeric = central_differences(inputs, f);
  EXPECT_LT(max_relative_error(analytic, numeric), 1e-5) << "op " << op;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, 16));

TEST(Grad, IsLinear) {
  Rng rng = make_rng(5);
  Tensor<double> xv = randn<double>(2, 3, rng);
  auto grads_of = [&](double a, double b) {
    Tape<double> tape;
    auto x = tape.leaf(xv);
    auto f = diff::sum(diff::sin(diff::mul(x, x)));
    auto g = diff::sum(diff::exp(diff::scale(x, 0.5)));
    auto h = diff::add(diff::scale(f, a), diff::scale(g, b));
    const Var<double> wrt[] = {x};
    return diff::grad<double>(tape, h, wrt)[0];
  };
  const auto gf = grads_of(1.0, 0.0), gg = grads_of(0.0, 1.0), gh = grads_of(2.5, -1.5);
  for (std::size_t i = 0; i < gh.numel(); ++i) {
    EXPECT_NEAR(gh[i], 2.5 * gf[i] - 1.5 * gg[i], 1e-12);
  }
}

TEST(Grad, RepeatedBackwardIsBitIdentical) {
  Rng rng = make_rng(6);
  Tape<float> tape;
  auto x = tape.leaf(randn<float>(16, 8, rng));
  auto w = tape.leaf(randn<float>(8, 8, rng));
  auto y = diff::mean(diff::silu(diff::matmul(x, w)));
  const Var<float> wrt[] = {x, w};
  auto g1 = diff::grad<float>(tape, y, wrt);
  auto g2 = diff::grad<float>(tape, y, wrt);
  EXPECT_EQ(g1, g2);
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

TEST(Checkpoint, IdentitySegment) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::matrix(1, 3, {1.0, -2.0, 4.0}));
  diff::Segment<double> id = [](Tape<double>&, std::span<const Var<double>> in) {
    return std::vector<Var<double>>{in[0]};
  };
  const Var<double> ins[] = {x};
  auto out = diff::checkpoint<double>(tape, id, ins).front();
  EXPECT_EQ(out.value(), x.value());
  const Var<double> wrt[] = {x};
  EXPECT_EQ(diff::grad<double>(tape, diff::sum(out), wrt)[0], Tensor<double>::matrix(1, 3, 1.0));
}

TEST(Checkpoint, SquareSegment) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(3.0));
  diff::Segment<double> sq = [](Tape<double>&, std::span<const Var<double>> in) {
    return std::vector<Var<double>>{diff::mul(in[0], in[0])};
  };
  const Var<double> ins[] = {x};
  auto out = diff::checkpoint<double>(tape, sq, ins).front();
  EXPECT_DOUBLE_EQ(out.value().item(), 9.0);
  const Var<double> wrt[] = {x};
  EXPECT_DOUBLE_EQ(diff::grad<double>(tape, out, wrt)[0].item(), 6.0);
}

TEST(Checkpoint, DoesNotKeepSegmentInternals) {
  Rng rng = make_rng(8);
  Tape<double> direct, ckpt;
  auto seg = [](Tape<double>&, std::span<const Var<double>> in) {
    auto h = diff::silu(diff::matmul(in[0], in[1]));
    h = diff::silu(diff::matmul(h, in[1]));
    return std::vector<Var<double>>{diff::sin(h)};
  };
  Tensor<double> xv = randn<double>(4, 4, rng), wv = randn<double>(4, 4, rng);
  std::vector<Var<double>> din{direct.leaf(xv), direct.leaf(wv)};
  seg(direct, din);
  std::vector<Var<double>> cin{ckpt.leaf(xv), ckpt.leaf(wv)};
  diff::checkpoint<double>(ckpt, seg, cin);
  EXPECT_LT(ckpt.size(), direct.size());
}

TEST(Checkpoint, MultipleOutputs) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::matrix(1, 2, {1.5, -0.5}));
  diff::Segment<double> seg = [](Tape<double>&, std::span<const Var<double>> in) {
    return std::vector<Var<double>>{diff::mul(in[0], in[0]), diff::sin(in[0])};
  };
  const Var<double> ins[] = {x};
  auto outs = diff::checkpoint<double>(tape, seg, ins);
  auto y = diff::add(diff::sum(outs[0]), diff::sum(outs[1]));
  const Var<double> wrt[] = {x};
  auto g = diff::grad<double>(tape, y, wrt)[0];
  EXPECT_NEAR(g[0], 2 * 1.5 + std::cos(1.5), 1e-15);
  EXPECT_NEAR(g[1], 2 * -0.5 + std::cos(-0.5), 1e-15);
}

TEST(Checkpoint, HiddenRandomnessIsDetected) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(1.0));
  Rng hidden = make_rng(9);
  diff::Segment<double> seg = [&hidden](Tape<double>& t, std::span<const Var<double>> in) {
    auto noise = t.constant(randn<double>(1, 1, hidden));
    return std::vector<Var<double>>{diff::add(in[0], noise)};
  };
  const Var<double> ins[] = {x};
  auto out = diff::checkpoint<double>(tape, seg, ins).front();
  const Var<double> wrt[] = {x};
  EXPECT_THROW(diff::grad<double>(tape, out, wrt), NondeterminismError);
}

// Chains of checkpointed segments give the unsegmented gradients, for every
// chain length up to 20.
TEST(Checkpoint, ChainsAreGradientTransparent) {
  for (int length = 1; length <= 20; ++length) {
    Rng rng = make_rng(1000 + length);
    const Tensor<double> x0 = randn<double>(3, 4, rng);
    const Tensor<double> w0 = randn<double>(4, 4, rng);
    const Tensor<double> b0 = randn<double>(1, 4, rng);
    auto step = [](std::span<const Var<double>> in) {
      auto h = diff::add(diff::matmul(in[0], in[1]), in[2]);
      return diff::scale(diff::silu(h), 0.5);
    };
    auto run = [&](bool checkpointed) {
      Tape<double> tape;
      auto x = tape.leaf(x0);
      auto w = tape.leaf(w0);
      auto b = tape.leaf(b0);
      Var<double> h = x;
      for (int s = 0; s < length; ++s) {
        const Var<double> in[] = {h, w, b};
        if (checkpointed) {
          diff::Segment<double> seg = [&step](Tape<double>&, std::span<const Var<double>> i) {
            return std::vector<Var<double>>{step(i)};
          };
          h = diff::checkpoint<double>(tape, seg, in).front();
        } else {
          h = step(in);
        }
      }
      auto loss = diff::sum(diff::mul(h, h));
      const Var<double> wrt[] = {x, w, b};
      return diff::grad<double>(tape, loss, wrt);
    };
    const auto plain = run(false);
    const auto ckpt = run(true);
    EXPECT_LT(max_relative_error(ckpt, plain, 1e-300), 1e-10) << "length " << length;
  }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  std::vector<Tensor<double>> p{Tensor<double>::matrix(2, 2, {1, 2, 3, 4})};
  const auto before = p;
  auto st = diff::AdamState<double>::init({}, p);
  std::vector<Tensor<double>> g{Tensor<double>::matrix(2, 2, 0.0)};
  diff::adam_step<double>(p, g, st);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  // Hand evaluation: m = 0.1, v = 0.001, mhat = 1, vhat = 1,
  // update = 1e-3 * 1 / (1 + 1e-8).
  std::vector<Tensor<double>> p{Tensor<double>::scalar(0.0)};
  auto st = diff::AdamState<double>::init({1e-3, 0.9, 0.999, 1e-8}, p);
  std::vector<Tensor<double>> g{Tensor<double>::scalar(1.0)};
  diff::adam_step<double>(p, g, st);
  EXPECT_NEAR(p[0].item(), -1e-3 / (1.0 + 1e-8), 1e-18);
}

TEST(Adam, ConstantGradientDecreasesMonotonically) {
  std::vector<Tensor<double>> p{Tensor<double>::scalar(0.0)};
  auto st = diff::AdamState<double>::init({1e-3, 0.9, 0.999, 1e-8}, p);
  std::vector<Tensor<double>> g{Tensor<double>::scalar(1.0)};
  double prev = p[0].item();
  for (int s = 0; s < 2; ++s) {
    diff::adam_step<double>(p, g, st);
    EXPECT_LT(p[0].item(), prev);
    prev = p[0].item();
  }
  // Step 2: m = 0.19, v = 0.001999, bias-corrected both equal 1 again.
  EXPECT_NEAR(prev, -2e-3 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, ShapeMismatchIsContractViolation) {
  std::vector<Tensor<double>> p{Tensor<double>::matrix(2, 2, 0.0)};
  auto st = diff::AdamState<double>::init({}, p);
  std::vector<Tensor<double>> g{Tensor<double>::matrix(1, 4, 0.0)};
  EXPECT_THROW(diff::adam_step<double>(p, g, st), ContractViolation);
}

}  // namespace
}  // namespace mmdlab
