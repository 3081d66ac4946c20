#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "mcft/tensor.hpp"

namespace mcft {
namespace autodiff {

using Var = int;

/// Eager tape: every op computes its value on creation and records a backward
/// closure. One Graph per forward pass (or per batch); graphs are cheap,
/// thread-local objects, which is what makes per-sample parallelism safe.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor t, bool requires_grad = false);

  // -- matrix products ------------------------------------------------------
  Var matmul(Var a, Var b);                 // [n,k]x[k,m] -> [n,m]
  Var matmul_nt2(Var a, Var b);             // [n,d]x[m,d] -> [n,m]
  Var bmm_nt(Var a, Var b);                 // [B,n,p]x[B,m,p] -> [B,n,m]
  Var bmm_nn(Var a, Var b);                 // [B,n,p]x[B,p,q] -> [B,n,q]

  // -- elementwise & broadcast ----------------------------------------------
  Var add(Var a, Var b);
  Var add_bias(Var a, Var bias);            // bias over last dim
  Var scale(Var a, double c);
  Var affine(Var a, double k, double c);    // k*a + c
  Var log_ew(Var a);
  Var gelu(Var a);
  Var mul_const(Var a, Tensor mask);        // elementwise by a constant
  Var add_const(Var a, Tensor c);

  // -- normalization --------------------------------------------------------
  Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);
  Var softmax(Var a);                       // over last dim, rank 2 or 3
  Var log_softmax(Var a);                   // rank 2
  Var normalize_rows(Var a, double eps = 1e-12);

  // -- shape plumbing -------------------------------------------------------
  Var reshape(Var a, std::vector<int> shape);
  Var split_heads(Var a, int heads);        // [T,d] -> [h,T,d/h]
  Var merge_heads(Var a);                   // [h,T,dh] -> [T,h*dh]
  Var concat_rows(Var a, Var b);
  Var row(Var a, int i);                    // [r,c] -> [1,c]
  Var group_max(Var a, int group);          // [m*g,d] -> [m,d], max over g

  // -- reductions / losses --------------------------------------------------
  Var pick(Var a, int i, int j);            // scalar a[i,j]
  Var masked_sum(Var a, std::vector<uint8_t> mask);
  Var mean_all(Var a);
  Var combine(const std::vector<Var>& scalars, const std::vector<double>& w,
              double bias = 0.0);
  /// Cosine similarity between a (flattened) and a constant target, with an
  /// epsilon-stabilized denominator. Gradient flows to `a` only.
  Var cosine_to_const(Var a, Tensor target, double eps = 1e-8);
  /// Symmetric Chamfer distance (mean squared nearest-neighbor, both
  /// directions) between predicted points [kp,3] and constant targets [kg,3].
  Var chamfer_to_const(Var pred, Tensor target);

  // -- access ----------------------------------------------------------------
  const Tensor& val(Var v) const { return nodes_[v].val; }
  bool needs_grad(Var v) const { return nodes_[v].needs_grad; }
  /// Gradient of the last backward() target w.r.t. node v (zeros if none
  /// reached it). Only meaningful for nodes with needs_grad.
  const Tensor& grad(Var v);
  /// Forces gradient tracking through v even if no upstream leaf requires it
  /// (used to capture per-layer output gradients for salience scoring).
  void force_grad(Var v) { nodes_[v].needs_grad = true; }

  /// Reverse pass from a scalar loss. `seeds` inject additional upstream
  /// gradients into interior nodes (used when a cross-sample loss term is
  /// differentiated in a separate graph).
  void backward(Var loss, const std::vector<std::pair<Var, Tensor>>& seeds = {});

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    bool grad_set = false;
    std::function<void(Graph&, Var)> back;
  };

  Var push(Tensor val, bool needs, std::function<void(Graph&, Var)> back);
  Tensor& acc(Var v);  // grad accumulator, zero-initialized on first touch

  std::vector<Node> nodes_;
};

}  // namespace autodiff
}  // namespace mcft
