// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal reverse-mode differentiation over rank-2 tensors.
//
// A Tape records every op in creation order, which is also a topological
// order, so backward is a single reverse sweep with a fixed accumulation
// order. Results are bit-reproducible for a fixed seed and precision.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmdlab/errors.hpp"
#include "mmdlab/tensor.hpp"

namespace mmdlab::diff {

template <class T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  /// Called during backward with the node's own id; reads grad(self) and
  /// accumulates into parents.
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable input. Gradients of leaves survive the backward sweep.
  Var<T> leaf(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, true, true});
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, false, false});
    return {this, nodes_.size() - 1};
  }

  /// Append an op result. The backward closure is dropped when no parent
  /// requires a gradient.
  Var<T> record(std::string_view op, Tensor<T> value, std::vector<std::size_t> parents,
                Backward backward) {
    if (!value.all_finite()) {
      throw NonFiniteError("op '" + std::string(op) + "' produced non-finite values");
    }
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
    Node n{std::move(value), {}, needs ? std::move(parents) : std::vector<std::size_t>{},
           needs ? std::move(backward) : Backward{}, needs, false};
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Tensor<T>& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(std::size_t id, const Tensor<T>& g) {
    if (!nodes_[id].requires_grad) return;
    Tensor<T>& slot = grad_slot(id);
    detail::require(slot.shape() == g.shape(), "accumulate: gradient shape mismatch " +
                                                   shape_str(slot.shape()) + " vs " +
                                                   shape_str(g.shape()));
    auto s = slot.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += gd[i];
  }

  const Tensor<T>& grad(std::size_t id) const { return nodes_.at(id).grad; }

  /// Gradient of a leaf after backward; zeros when unreachable.
  Tensor<T> grad_of(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  /// Reverse sweep seeded with `seeds[i]` at `outputs[i]`.
  void backward(std::span<const Var<T>> outputs, std::span<const Tensor<T>> seeds) {
    detail::require(outputs.size() == seeds.size(), "backward: outputs/seeds size mismatch");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    std::size_t top = 0;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      detail::require(outputs[i].id() < nodes_.size(), "backward: foreign output");
      accumulate(outputs[i].id(), seeds[i]);
      top = std::max(top, outputs[i].id() + 1);
    }
    for (std::size_t i = top; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
      // Intermediate gradients are dead once propagated.
      if (!nodes_[i].is_leaf) nodes_[i].grad = Tensor<T>();
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad;
    bool is_leaf;
  };
  std::vector<Node> nodes_;
};

/// d output / d leaf for every leaf in `wrt`. Output must be a scalar node.
template <class T>
std::vector<Tensor<T>> grad(Tape<T>& tape, const Var<T>& output, std::span<const Var<T>> wrt) {
  if (output.value().numel() != 1) {
    throw ContractViolation("grad: output must be scalar, got shape " +
                            shape_str(output.shape()));
  }
  const Var<T> outs[] = {output};
  const Tensor<T> seeds[] = {Tensor<T>(output.shape(), T(1))};
  tape.backward(outs, seeds);
  std::vector<Tensor<T>> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) result.push_back(tape.grad_of(w.id()));
  return result;
}

namespace detail {

using mmdlab::detail::require;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

template <class T>
MapC<T> as_mat(const Tensor<T>& t) {
  return MapC<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}
template <class T>
MapM<T> as_mat(Tensor<T>& t) {
  return MapM<T>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  require(a.size() == 2 && b.size() == 2, std::string(op) + ": rank-2 operands required");
  Shape out(2);
  for (int d = 0; d < 2; ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      throw ContractViolation(std::string(op) + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
    }
  }
  return out;
}

/// Sum a broadcast gradient back down to `target`.
template <class T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor<T> out(target);
  const std::size_t r = g.rows(), c = g.cols();
  const bool rb = target[0] == 1, cb = target[1] == 1;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out(rb ? 0 : i, cb ? 0 : j) += g(i, j);
    }
  }
  return out;
}

template <class T, class F>
Tensor<T> broadcast_apply(const Tensor<T>& a, const Tensor<T>& b, const Shape& out_shape, F f) {
  Tensor<T> out(out_shape);
  const std::size_t r = out_shape[0], c = out_shape[1];
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  const bool ar = a.rows() == 1, ac = a.cols() == 1;
  const bool br = b.rows() == 1, bc = b.cols() == 1;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out(i, j) = f(a(ar ? 0 : i, ac ? 0 : j), b(br ? 0 : i, bc ? 0 : j));
    }
  }
  return out;
}

template <class T>
void same_tape(const Var<T>& a, const Var<T>& b, std::string_view op) {
  require(&a.tape() == &b.tape(), std::string(op) + ": operands live on different tapes");
}

template <class T, class F>
Var<T> unary(const Var<T>& a, std::string_view name, F f,
             std::function<Tensor<T>(const Tensor<T>& x, const Tensor<T>& y,
                                     const Tensor<T>& g)>
                 local) {
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  const std::size_t pa = a.id();
  return a.tape().record(name, std::move(y), {pa},
                         [pa, local = std::move(local)](Tape<T>& tp, std::size_t self) {
                           tp.accumulate(pa, local(tp.value(pa), tp.value(self), tp.grad(self)));
                         });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (numpy-style broadcasting on rank-2 operands)
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "add");
  Shape s = detail::broadcast_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = detail::broadcast_apply(a.value(), b.value(), s, [](T x, T z) { return x + z; });
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape().record("add", std::move(y), {pa, pb}, [pa, pb](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(pa)) tp.accumulate(pa, detail::reduce_to(g, tp.value(pa).shape()));
    if (tp.requires_grad(pb)) tp.accumulate(pb, detail::reduce_to(g, tp.value(pb).shape()));
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "sub");
  Shape s = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y = detail::broadcast_apply(a.value(), b.value(), s, [](T x, T z) { return x - z; });
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape().record("sub", std::move(y), {pa, pb}, [pa, pb](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(self);
    if (tp.requires_grad(pa)) tp.accumulate(pa, detail::reduce_to(g, tp.value(pa).shape()));
    if (tp.requires_grad(pb)) {
      Tensor<T> ng = detail::reduce_to(g, tp.value(pb).shape());
      for (auto& v : ng.data()) v = -v;
      tp.accumulate(pb, ng);
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "mul");
  Shape s = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y = detail::broadcast_apply(a.value(), b.value(), s, [](T x, T z) { return x * z; });
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape().record("mul", std::move(y), {pa, pb}, [pa, pb, s](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(self);
    auto mulg = [&](std::size_t other) {
      return detail::broadcast_apply(g, tp.value(other), s, [](T x, T z) { return x * z; });
    };
    if (tp.requires_grad(pa)) tp.accumulate(pa, detail::reduce_to(mulg(pb), tp.value(pa).shape()));
    if (tp.requires_grad(pb)) tp.accumulate(pb, detail::reduce_to(mulg(pa), tp.value(pb).shape()));
  });
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Scalar-broadcast ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary<T>(a, "scale", [s](T x) { return s * x; },
                          [s](const Tensor<T>&, const Tensor<T>&, const Tensor<T>& g) {
                            Tensor<T> out = g;
                            for (auto& v : out.data()) v *= s;
                            return out;
                          });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary<T>(a, "add_scalar", [s](T x) { return x + s; },
                          [](const Tensor<T>&, const Tensor<T>&, const Tensor<T>& g) { return g; });
}

template <class T>
Var<T> operator*(T s, const Var<T>& a) { return scale(a, s); }
template <class T>
Var<T> operator-(const Var<T>& a) { return scale(a, T(-1)); }

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

/// x^p for a constant exponent p.
template <class T>
Var<T> pow(const Var<T>& a, T p) {
  return detail::unary<T>(
      a, "pow", [p](T x) { return std::pow(x, p); },
      [p](const Tensor<T>& x, const Tensor<T>&, const Tensor<T>& g) {
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = g[i] * p * std::pow(x[i], p - T(1));
        return out;
      });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return detail::unary<T>(
      a, "exp", [](T x) { return std::exp(x); },
      [](const Tensor<T>&, const Tensor<T>& y, const Tensor<T>& g) {
        Tensor<T> out(y.shape());
        for (std::size_t i = 0; i < y.numel(); ++i) out[i] = g[i] * y[i];
        return out;
      });
}

template <class T>
Var<T> sqrt(const Var<T>& a) {
  return detail::unary<T>(
      a, "sqrt", [](T x) { return std::sqrt(x); },
      [](const Tensor<T>&, const Tensor<T>& y, const Tensor<T>& g) {
        Tensor<T> out(y.shape());
        for (std::size_t i = 0; i < y.numel(); ++i) out[i] = g[i] / (T(2) * y[i]);
        return out;
      });
}

template <class T>
Var<T> sin(const Var<T>& a) {
  return detail::unary<T>(
      a, "sin", [](T x) { return std::sin(x); },
      [](const Tensor<T>& x, const Tensor<T>&, const Tensor<T>& g) {
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = g[i] * std::cos(x[i]);
        return out;
      });
}

template <class T>
Var<T> cos(const Var<T>& a) {
  return detail::unary<T>(
      a, "cos", [](T x) { return std::cos(x); },
      [](const Tensor<T>& x, const Tensor<T>&, const Tensor<T>& g) {
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) out[i] = -g[i] * std::sin(x[i]);
        return out;
      });
}

/// Sigmoid-weighted linear unit, x * sigmoid(x).
template <class T>
Var<T> silu(const Var<T>& a) {
  auto sigmoid = [](T x) { return T(1) / (T(1) + std::exp(-x)); };
  return detail::unary<T>(
      a, "silu", [sigmoid](T x) { return x * sigmoid(x); },
      [sigmoid](const Tensor<T>& x, const Tensor<T>&, const Tensor<T>& g) {
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) {
          const T s = sigmoid(x[i]);
          out[i] = g[i] * (s * (T(1) + x[i] * (T(1) - s)));
        }
        return out;
      });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "matmul");
  detail::require(a.value().rank() == 2 && b.value().rank() == 2 && a.cols() == b.rows(),
                  "matmul: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> y = Tensor<T>::matrix(a.rows(), b.cols());
  detail::as_mat(y).noalias() = detail::as_mat(a.value()) * detail::as_mat(b.value());
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape().record("matmul", std::move(y), {pa, pb}, [pa, pb](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(self);
    const Tensor<T>& av = tp.value(pa);
    const Tensor<T>& bv = tp.value(pb);
    if (tp.requires_grad(pa)) {
      Tensor<T> ga(av.shape());
      detail::as_mat(ga).noalias() = detail::as_mat(g) * detail::as_mat(bv).transpose();
      tp.accumulate(pa, ga);
    }
    if (tp.requires_grad(pb)) {
      Tensor<T> gb(bv.shape());
      detail::as_mat(gb).noalias() = detail::as_mat(av).transpose() * detail::as_mat(g);
      tp.accumulate(pb, gb);
    }
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  Tensor<T> y = Tensor<T>::matrix(a.cols(), a.rows());
  detail::as_mat(y) = detail::as_mat(a.value()).transpose();
  const std::size_t pa = a.id();
  return a.tape().record("transpose", std::move(y), {pa}, [pa](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(self);
    Tensor<T> out = Tensor<T>::matrix(g.cols(), g.rows());
    detail::as_mat(out) = detail::as_mat(g).transpose();
    tp.accumulate(pa, out);
  });
}

/// Sum of all entries, shape [1,1].
template <class T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (T v : a.value().data()) s += v;
  const std::size_t pa = a.id();
  return a.tape().record("sum", Tensor<T>::scalar(s), {pa}, [pa](Tape<T>& tp, std::size_t self) {
    tp.accumulate(pa, Tensor<T>(tp.value(pa).shape(), tp.grad(self).item()));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().numel()));
}

/// Per-row sum, shape [rows,1].
template <class T>
Var<T> row_sum(const Var<T>& a) {
  const Tensor<T>& x = a.value();
  Tensor<T> y = Tensor<T>::matrix(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T s = T(0);
    for (T v : x.row(i)) s += v;
    y(i, 0) = s;
  }
  const std::size_t pa = a.id();
  return a.tape().record("row_sum", std::move(y), {pa}, [pa](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& g = tp.grad(self);
    Tensor<T> out(tp.value(pa).shape());
    for (std::size_t i = 0; i < out.rows(); ++i) {
      for (auto& v : out.row(i)) v = g(i, 0);
    }
    tp.accumulate(pa, out);
  });
}

/// Column-wise concatenation [r,a] ++ [r,b] -> [r,a+b].
template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "concat_cols");
  detail::require(a.rows() == b.rows(), "concat_cols: row counts differ");
  const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor<T> y = Tensor<T>::matrix(r, ca + cb);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.value().row(i).begin(), ca, y.row(i).begin());
    std::copy_n(b.value().row(i).begin(), cb, y.row(i).begin() + ca);
  }
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape().record("concat_cols", std::move(y), {pa, pb},
                         [pa, pb, r, ca, cb](Tape<T>& tp, std::size_t self) {
                           const Tensor<T>& g = tp.grad(self);
                           Tensor<T> ga = Tensor<T>::matrix(r, ca), gb = Tensor<T>::matrix(r, cb);
                           for (std::size_t i = 0; i < r; ++i) {
                             std::copy_n(g.row(i).begin(), ca, ga.row(i).begin());
                             std::copy_n(g.row(i).begin() + ca, cb, gb.row(i).begin());
                           }
                           if (tp.requires_grad(pa)) tp.accumulate(pa, ga);
                           if (tp.requires_grad(pb)) tp.accumulate(pb, gb);
                         });
}

// ---------------------------------------------------------------------------
// Gradient checkpointing
// ---------------------------------------------------------------------------

/// A deterministic function of its inputs. Any randomness must arrive as an
/// input tensor.
template <class T>
using Segment = std::function<std::vector<Var<T>>(Tape<T>&, std::span<const Var<T>>)>;

/// Evaluate `segment` without keeping its internal nodes on `tape`. The
/// segment is re-run during backward to rebuild them. Throws
/// NondeterminismError if the recomputed outputs differ from the forward ones.
template <class T>
std::vector<Var<T>> checkpoint(Tape<T>& tape, Segment<T> segment, std::span<const Var<T>> inputs) {
  std::vector<std::size_t> parents;
  std::vector<bool> wants;
  parents.reserve(inputs.size());
  for (const auto& in : inputs) {
    detail::require(&in.tape() == &tape, "checkpoint: input from another tape");
    parents.push_back(in.id());
    wants.push_back(in.requires_grad());
  }

  std::vector<Shape> out_shapes;
  Tensor<T> flat;
  {
    Tape<T> inner;
    std::vector<Var<T>> args;
    for (const auto& in : inputs) args.push_back(inner.constant(in.value()));
    std::vector<Var<T>> outs = segment(inner, args);
    std::size_t total = 0;
    for (const auto& o : outs) {
      out_shapes.push_back(o.shape());
      total += o.value().numel();
    }
    flat = Tensor<T>({total, 1});
    std::size_t off = 0;
    for (const auto& o : outs) {
      std::copy(o.value().data().begin(), o.value().data().end(), flat.data().begin() + off);
      off += o.value().numel();
    }
  }

  auto seg = std::make_shared<Segment<T>>(std::move(segment));
  Var<T> hub = tape.record(
      "checkpoint", flat, parents,
      [seg, parents, wants, out_shapes](Tape<T>& tp, std::size_t self) {
        Tape<T> inner;
        std::vector<Var<T>> args;
        for (std::size_t k = 0; k < parents.size(); ++k) {
          args.push_back(wants[k] ? inner.leaf(tp.value(parents[k]))
                                  : inner.constant(tp.value(parents[k])));
        }
        std::vector<Var<T>> outs = (*seg)(inner, args);
        const Tensor<T>& stored = tp.value(self);
        const Tensor<T>& g = tp.grad(self);
        std::vector<Tensor<T>> seeds;
        std::size_t off = 0;
        if (outs.size() != out_shapes.size()) {
          throw NondeterminismError("checkpoint: recomputation changed the number of outputs");
        }
        for (std::size_t j = 0; j < outs.size(); ++j) {
          const auto v = outs[j].value().data();
          if (outs[j].shape() != out_shapes[j] ||
              !std::equal(v.begin(), v.end(), stored.data().begin() + off)) {
            throw NondeterminismError(
                "checkpoint: recomputed segment output " + std::to_string(j) +
                " differs from the forward pass (segment consumed state not passed as input?)");
          }
          seeds.emplace_back(out_shapes[j], std::vector<T>(g.data().begin() + off,
                                                            g.data().begin() + off + v.size()));
          off += v.size();
        }
        inner.backward(outs, seeds);
        for (std::size_t k = 0; k < parents.size(); ++k) {
          if (wants[k]) tp.accumulate(parents[k], inner.grad_of(args[k].id()));
        }
      });

  std::vector<Var<T>> result;
  std::size_t off = 0;
  for (const auto& s : out_shapes) {
    const std::size_t n = shape_numel(s);
    Tensor<T> v(s, std::vector<T>(flat.data().begin() + off, flat.data().begin() + off + n));
    const std::size_t hid = hub.id();
    result.push_back(tape.record("checkpoint_out", std::move(v), {hid},
                                 [hid, off, n](Tape<T>& tp, std::size_t self) {
                                   const Tensor<T>& g = tp.grad(self);
                                   Tensor<T>& hg = tp.grad_slot(hid);
                                   for (std::size_t i = 0; i < n; ++i) hg[off + i] += g[i];
                                 }));
    off += n;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t step = 0;

  static AdamState init(const AdamConfig& cfg, std::span<const Tensor<T>> params) {
    AdamState s;
    s.config = cfg;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

/// In-place Adam update with bias correction. The step counter is advanced
/// before the correction terms are formed.
template <class T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdamState<T>& state) {
  detail::require(params.size() == grads.size() && params.size() == state.m.size(),
                  "adam_step: parameter/gradient/state count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    detail::require(params[k].shape() == grads[k].shape() &&
                        params[k].shape() == state.m[k].shape(),
                    "adam_step: shape mismatch for tensor " + std::to_string(k));
  }
  state.step += 1;
  const AdamConfig& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].data();
    auto g = grads[k].data();
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p[i] = static_cast<T>(p[i] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

}  // namespace mmdlab::diff
