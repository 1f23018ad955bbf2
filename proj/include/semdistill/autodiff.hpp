#ifndef SEMDISTILL_AUTODIFF_HPP
#define SEMDISTILL_AUTODIFF_HPP

#include <functional>
#include <memory>
#include <vector>

#include "semdistill/tensor.hpp"

namespace semdistill::ad {

// Reverse-mode autodiff over Tensor. Graphs are built per step by the op
// functions below; backward() walks the reachable subgraph in reverse
// topological order. Parameters are long-lived leaf nodes, everything
// else is freed when the step's Vars go out of scope.
class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Tensor& g);
  // Accumulate a raw buffer of the node's own size.
  void accumulate_raw(const double* g, int64_t n);
  Tensor& ensure_grad();
  void zero_grad();
};

Var leaf(Tensor value, bool requires_grad = false);
Var constant(Tensor value);

// Seeds root (a scalar) with gradient 1 and propagates to all leaves.
void backward(const Var& root);

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var exp_of(const Var& a);
Var log_of(const Var& a);
Var clamp_min(const Var& a, double floor);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
// Broadcast a one-element Var across a tensor.
Var mul_scalar_var(const Var& a, const Var& s);
Var add_scalar_var(const Var& a, const Var& s);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                 // [m,k]x[k,n]
Var add_rowvec(const Var& x, const Var& bias);          // [m,n] + [n]
Var bmm(const Var& a, const Var& b);                    // [B,m,k]x[B,k,n]
Var bmm_nt(const Var& a, const Var& b);                 // [B,m,k]x[B,n,k]^T
Var slice_cols(const Var& x, int64_t start, int64_t len);
Var concat_cols(const Var& a, const Var& b);

// ---- reductions / normalization ----
Var sum_all(const Var& a);                              // -> [1]
Var mean_all(const Var& a);                             // -> [1]
Var softmax_last(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// ---- shape ----
Var reshape(const Var& a, std::vector<int64_t> shape);
// [N,C,H,W] -> [N*H*W, C] token rows, and back.
Var nchw_to_tokens(const Var& x);
Var tokens_to_nchw(const Var& t, int64_t n, int64_t c, int64_t h, int64_t w);
// [N*L, H*dh] -> [N*H, L, dh] per-head batches, and back.
Var split_heads(const Var& x, int64_t n, int64_t l, int64_t heads);
Var merge_heads(const Var& x, int64_t n, int64_t l, int64_t heads);
// y[(n,l),:] = x[(n,l),:] + e[l,:]
Var add_tile_rows(const Var& x, const Var& e, int64_t n);

// ---- structured ops ----
Var conv2d(const Var& x, const Var& w, const Var& bias, int64_t stride, int64_t pad);
Var global_avg_pool(const Var& x);                      // [N,C,H,W] -> [N,C]
Var channel_scale(const Var& x, const Var& w);          // [N,C,H,W] * [N,C]
// Per-row scaling to unit mean square power. Throws DegenerateInputError
// on an all-zero row.
Var power_normalize_rows(const Var& x);
// S[n][j] = ||x_n - m_j||^2 for x,m of shape [N,D].
Var sqdist_matrix(const Var& x, const Var& m);
// T[n][j] = S[n][n] - S[n][j]. Exactly zero wherever row entries equal the
// diagonal entry bit-for-bit.
Var diag_minus_bcast(const Var& s);

}  // namespace semdistill::ad

#endif  // SEMDISTILL_AUTODIFF_HPP
