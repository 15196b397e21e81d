/* Copyright 2026 The imbalance-forge Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "imbalance_forge/errors.hpp"
#include "imbalance_forge/tensor.hpp"

namespace imbalance_forge {

// ---------------------------------------------------------------------------
// Tape-free kernels. The tape below and the losses share these so that the
// forward values are computed one way only.
// ---------------------------------------------------------------------------

inline void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ValidationError(std::string(what) + " must be rank 2, got " +
                          shape_string(t.shape()));
  }
}

/// out[n,c] = sum_f x[n,f] * w[f,c] + b[c]
inline Tensor linear_forward(const Tensor& x, const Tensor& w,
                             const Tensor& b) {
  require_rank2(x, "linear input");
  require_rank2(w, "linear weight");
  if (b.rank() != 1 || x.dim(1) != w.dim(0) || w.dim(1) != b.dim(0)) {
    throw ValidationError("linear shape mismatch: x" + shape_string(x.shape()) +
                          " W" + shape_string(w.shape()) + " b" +
                          shape_string(b.shape()));
  }
  const std::size_t rows = x.dim(0), in = x.dim(1), out = w.dim(1);
  Tensor y({rows, out});
  for (std::size_t n = 0; n < rows; ++n) {
    auto yr = y.row(n);
    for (std::size_t c = 0; c < out; ++c) yr[c] = b[c];
    for (std::size_t f = 0; f < in; ++f) {
      const double xv = x(n, f);
      const auto wr = w.row(f);
      for (std::size_t c = 0; c < out; ++c) yr[c] += xv * wr[c];
    }
  }
  return y;
}

/// Row-wise softmax over the last axis of a rank-2 tensor, max-subtracted.
inline Tensor softmax_rows(const Tensor& logits) {
  require_rank2(logits, "softmax input");
  Tensor p = Tensor::zeros_like(logits);
  const std::size_t classes = logits.dim(1);
  for (std::size_t n = 0; n < logits.dim(0); ++n) {
    const auto in = logits.row(n);
    auto out = p.row(n);
    const double m = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      out[c] = std::exp(in[c] - m);
      z += out[c];
    }
    for (std::size_t c = 0; c < classes; ++c) out[c] /= z;
  }
  return p;
}

/// Vector-Jacobian product of row softmax: dx = p * (g - <p, g>).
inline Tensor softmax_backward_rows(const Tensor& p, const Tensor& grad_p) {
  Tensor dx = Tensor::zeros_like(p);
  const std::size_t classes = p.dim(1);
  for (std::size_t n = 0; n < p.dim(0); ++n) {
    const auto pr = p.row(n);
    const auto gr = grad_p.row(n);
    double dot = 0.0;
    for (std::size_t c = 0; c < classes; ++c) dot += pr[c] * gr[c];
    auto out = dx.row(n);
    for (std::size_t c = 0; c < classes; ++c) out[c] = pr[c] * (gr[c] - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

/// Records primitive operations in order and replays them backwards.
///
/// Values are immutable once recorded. backward() walks nodes from the root
/// down to index 0, each exactly once, accumulating gradients into every node
/// that (transitively) depends on a leaf created with requires_grad.
class Tape {
 public:
  enum class Op { kLeaf, kLinear, kTanh, kRelu, kSoftmax };

  NodeId leaf(Tensor value, bool requires_grad = true) {
    return push(Op::kLeaf, {}, std::move(value), requires_grad);
  }

  NodeId linear(NodeId x, NodeId w, NodeId b) {
    Tensor y = linear_forward(value(x), value(w), value(b));
    return push(Op::kLinear, {x, w, b}, std::move(y), false);
  }

  NodeId tanh(NodeId x) {
    Tensor y = value(x);
    for (double& v : y.data()) v = std::tanh(v);
    return push(Op::kTanh, {x}, std::move(y), false);
  }

  NodeId relu(NodeId x) {
    Tensor y = value(x);
    for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
    return push(Op::kRelu, {x}, std::move(y), false);
  }

  NodeId softmax(NodeId x) {
    return push(Op::kSoftmax, {x}, softmax_rows(value(x)), false);
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id.index).value; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(objective)/d(root) = seed and accumulates into all ancestors.
  /// Gradients from earlier backward() calls are cleared.
  void backward(NodeId root, const Tensor& seed) {
    if (seed.shape() != value(root).shape()) {
      throw ValidationError("backward seed shape " + shape_string(seed.shape()) +
                            " does not match root " +
                            shape_string(value(root).shape()));
    }
    grads_.assign(nodes_.size(), Tensor());
    grads_[root.index] = seed;
    for (std::size_t i = root.index + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (grads_[i].empty() || node.op == Op::kLeaf) continue;
      const Tensor& g = grads_[i];
      switch (node.op) {
        case Op::kLinear:
          backward_linear(node, g);
          break;
        case Op::kTanh: {
          if (!needs(node.inputs[0])) break;
          Tensor dx = g;
          for (std::size_t k = 0; k < dx.size(); ++k) {
            const double y = node.value[k];
            dx[k] *= 1.0 - y * y;
          }
          accumulate(node.inputs[0], dx);
          break;
        }
        case Op::kRelu: {
          if (!needs(node.inputs[0])) break;
          const Tensor& x = value(node.inputs[0]);
          Tensor dx = g;
          for (std::size_t k = 0; k < dx.size(); ++k) {
            if (!(x[k] > 0.0)) dx[k] = 0.0;
          }
          accumulate(node.inputs[0], dx);
          break;
        }
        case Op::kSoftmax:
          if (needs(node.inputs[0])) {
            accumulate(node.inputs[0], softmax_backward_rows(node.value, g));
          }
          break;
        case Op::kLeaf:
          break;
      }
    }
  }

  /// Gradient of the last backward() objective w.r.t. a node; zeros if the
  /// node received none.
  Tensor grad(NodeId id) const {
    if (id.index < grads_.size() && !grads_[id.index].empty()) {
      return grads_[id.index];
    }
    return Tensor::zeros_like(value(id));
  }

 private:
  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    Tensor value;
    bool needs_grad;
  };

  NodeId push(Op op, std::vector<NodeId> inputs, Tensor value,
              bool requires_grad) {
    bool needs_grad = requires_grad;
    for (NodeId in : inputs) needs_grad = needs_grad || needs(in);
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), needs_grad});
    return NodeId{nodes_.size() - 1};
  }

  bool needs(NodeId id) const { return nodes_[id.index].needs_grad; }

  void accumulate(NodeId id, const Tensor& g) {
    Tensor& slot = grads_[id.index];
    if (slot.empty()) {
      slot = g;
      return;
    }
    for (std::size_t k = 0; k < g.size(); ++k) slot[k] += g[k];
  }

  void backward_linear(const Node& node, const Tensor& g) {
    const Tensor& x = value(node.inputs[0]);
    const Tensor& w = value(node.inputs[1]);
    const std::size_t rows = x.dim(0), in = x.dim(1), out = w.dim(1);
    if (needs(node.inputs[0])) {
      Tensor dx({rows, in});
      for (std::size_t n = 0; n < rows; ++n) {
        const auto gr = g.row(n);
        for (std::size_t f = 0; f < in; ++f) {
          const auto wr = w.row(f);
          double acc = 0.0;
          for (std::size_t c = 0; c < out; ++c) acc += gr[c] * wr[c];
          dx(n, f) = acc;
        }
      }
      accumulate(node.inputs[0], dx);
    }
    if (needs(node.inputs[1])) {
      Tensor dw({in, out});
      for (std::size_t n = 0; n < rows; ++n) {
        const auto gr = g.row(n);
        for (std::size_t f = 0; f < in; ++f) {
          const double xv = x(n, f);
          auto dwr = dw.row(f);
          for (std::size_t c = 0; c < out; ++c) dwr[c] += xv * gr[c];
        }
      }
      accumulate(node.inputs[1], dw);
    }
    if (needs(node.inputs[2])) {
      Tensor db({out});
      for (std::size_t n = 0; n < rows; ++n) {
        const auto gr = g.row(n);
        for (std::size_t c = 0; c < out; ++c) db[c] += gr[c];
      }
      accumulate(node.inputs[2], db);
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

struct ValueAndGrad {
  double value = 0.0;
  Tensor grad;
};

using ScalarFunction = std::function<ValueAndGrad(const Tensor&)>;

/// Max over coordinates of |a - n| / max(1e-8, |a| + |n|), where a is the
/// analytic gradient returned by f and n the central difference with step eps.
inline double grad_check(const ScalarFunction& f, const Tensor& x,
                         double eps = 1e-5) {
  const ValueAndGrad analytic = f(x);
  if (analytic.grad.shape() != x.shape()) {
    throw ValidationError("grad_check: gradient shape " +
                          shape_string(analytic.grad.shape()) +
                          " differs from input " + shape_string(x.shape()));
  }
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = f(probe).value;
    probe[i] = saved - eps;
    const double down = f(probe).value;
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic.grad[i];
    const double err =
        std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace imbalance_forge
