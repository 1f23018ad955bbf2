#include "semdistill/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <unordered_set>

namespace semdistill::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

namespace {

MatMap as_mat(Tensor& t, int64_t rows, int64_t cols) { return MatMap(t.data(), rows, cols); }

// Rows/cols split for "matrix over the last dim" views.
int64_t last_dim(const Tensor& t) { return t.shape().back(); }
int64_t lead_rows(const Tensor& t) { return t.size() / last_dim(t); }

Var make_node(Tensor value, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  return n;
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (!grad_ready) {
    grad = Tensor::zeros(value.shape());
    grad_ready = true;
  }
  return grad;
}

void Node::zero_grad() {
  grad_ready = false;
  grad = Tensor();
}

void Node::accumulate(const Tensor& g) {
  require_same_shape(value, g, "grad accumulate");
  accumulate_raw(g.data(), g.size());
}

void Node::accumulate_raw(const double* g, int64_t n) {
  Tensor& dst = ensure_grad();
  double* d = dst.data();
  for (int64_t i = 0; i < n; ++i) d[i] += g[i];
}

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

void backward(const Var& root) {
  if (root->value.size() != 1) {
    throw ShapeError("backward: root must be a scalar");
  }
  // Iterative post-order DFS over parents; the reversed post-order is a
  // reverse topological order of the reachable subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  if (root->requires_grad) {
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad_ready) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor out = a->value;
  const double* bd = b->value.data();
  for (int64_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Var pa = a, pb = b;
    n->backward_fn = [pa, pb](Node& self) {
      if (pa->requires_grad) pa->accumulate(self.grad);
      if (pb->requires_grad) pb->accumulate(self.grad);
    };
  }
  return n;
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "sub");
  Tensor out = a->value;
  const double* bd = b->value.data();
  for (int64_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Var pa = a, pb = b;
    n->backward_fn = [pa, pb](Node& self) {
      if (pa->requires_grad) pa->accumulate(self.grad);
      if (pb->requires_grad) {
        Tensor& g = pb->ensure_grad();
        for (int64_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    };
  }
  return n;
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor out = a->value;
  const double* bd = b->value.data();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Var pa = a, pb = b;
    n->backward_fn = [pa, pb](Node& self) {
      const int64_t sz = self.grad.size();
      if (pa->requires_grad) {
        Tensor& g = pa->ensure_grad();
        for (int64_t i = 0; i < sz; ++i) g[i] += self.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        Tensor& g = pb->ensure_grad();
        for (int64_t i = 0; i < sz; ++i) g[i] += self.grad[i] * pa->value[i];
      }
    };
  }
  return n;
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Var pa = a;
    n->backward_fn = [pa, s](Node& self) {
      Tensor& g = pa->ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    };
  }
  return n;
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] += c;
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Var pa = a;
    n->backward_fn = [pa](Node& self) { pa->accumulate(self.grad); };
  }
  return n;
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var exp_of(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Var pa = a;
    n->backward_fn = [pa](Node& self) {
      Tensor& g = pa->ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    };
  }
  return n;
}

Var log_of(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Var pa = a;
    n->backward_fn = [pa](Node& self) {
      Tensor& g = pa->ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pa->value[i];
    };
  }
  return n;
}

Var clamp_min(const Var& a, double floor) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], floor);
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Var pa = a;
    n->backward_fn = [pa, floor](Node& self) {
      Tensor& g = pa->ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i) {
        if (pa->value[i] > floor) g[i] += self.grad[i];
      }
    };
  }
  return n;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Var gelu(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) {
    double x = out[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Var pa = a;
    n->backward_fn = [pa](Node& self) {
      Tensor& g = pa->ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i) {
        double x = pa->value[i];
        double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        g[i] += self.grad[i] * (cdf + x * pdf);
      }
    };
  }
  return n;
}

Var sigmoid(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Var pa = a;
    n->backward_fn = [pa](Node& self) {
      Tensor& g = pa->ensure_grad();
      for (int64_t i = 0; i < g.size(); ++i) {
        double s = self.value[i];
        g[i] += self.grad[i] * s * (1.0 - s);
      }
    };
  }
  return n;
}

Var mul_scalar_var(const Var& a, const Var& s) {
  if (s->value.size() != 1) throw ShapeError("mul_scalar_var: scalar operand must have 1 element");
  double sv = s->value[0];
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= sv;
  Var n = make_node(std::move(out), {a, s});
  if (n->requires_grad) {
    Var pa = a, ps = s;
    n->backward_fn = [pa, ps, sv](Node& self) {
      if (pa->requires_grad) {
        Tensor& g = pa->ensure_grad();
        for (int64_t i = 0; i < g.size(); ++i) g[i] += sv * self.grad[i];
      }
      if (ps->requires_grad) {
        double acc = 0.0;
        for (int64_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa->value[i];
        ps->ensure_grad()[0] += acc;
      }
    };
  }
  return n;
}

Var add_scalar_var(const Var& a, const Var& s) {
  if (s->value.size() != 1) throw ShapeError("add_scalar_var: scalar operand must have 1 element");
  double sv = s->value[0];
  Tensor out = a->value;
  for (int64_t i = 0; i < out.size(); ++i) out[i] += sv;
  Var n = make_node(std::move(out), {a, s});
  if (n->requires_grad) {
    Var pa = a, ps = s;
    n->backward_fn = [pa, ps](Node& self) {
      if (pa->requires_grad) pa->accumulate(self.grad);
      if (ps->requires_grad) {
        double acc = 0.0;
        for (int64_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i];
        ps->ensure_grad()[0] += acc;
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(const Var& a, const Var& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + Tensor::shape_str(a->value.shape()) +
                     " x " + Tensor::shape_str(b->value.shape()));
  }
  const int64_t m = a->value.dim(0), k = a->value.dim(1), n_ = b->value.dim(1);
  Tensor out({m, n_});
  as_mat(out, m, n_).noalias() = as_mat(a->value, m, k) * as_mat(b->value, k, n_);
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Var pa = a, pb = b;
    n->backward_fn = [pa, pb, m, k, n_](Node& self) {
      ConstMatMap g(self.grad.data(), m, n_);
      if (pa->requires_grad) {
        MatMap ga(pa->ensure_grad().data(), m, k);
        ga.noalias() += g * as_mat(pb->value, k, n_).transpose();
      }
      if (pb->requires_grad) {
        MatMap gb(pb->ensure_grad().data(), k, n_);
        gb.noalias() += as_mat(pa->value, m, k).transpose() * g;
      }
    };
  }
  return n;
}

Var add_rowvec(const Var& x, const Var& bias) {
  if (x->value.rank() != 2 || bias->value.size() != x->value.dim(1)) {
    throw ShapeError("add_rowvec: bias length must match columns");
  }
  const int64_t m = x->value.dim(0), n_ = x->value.dim(1);
  Tensor out = x->value;
  {
    MatMap o = as_mat(out, m, n_);
    ConstMatMap b(bias->value.data(), 1, n_);
    o.rowwise() += b.row(0);
  }
  Var n = make_node(std::move(out), {x, bias});
  if (n->requires_grad) {
    Var px = x, pb = bias;
    n->backward_fn = [px, pb, m, n_](Node& self) {
      if (px->requires_grad) px->accumulate(self.grad);
      if (pb->requires_grad) {
        ConstMatMap g(self.grad.data(), m, n_);
        MatMap gb(pb->ensure_grad().data(), 1, n_);
        gb.row(0) += g.colwise().sum();
      }
    };
  }
  return n;
}

namespace {
void check_bmm(const Var& a, const Var& b, bool transpose_b) {
  if (a->value.rank() != 3 || b->value.rank() != 3 || a->value.dim(0) != b->value.dim(0)) {
    throw ShapeError("bmm: operands must be 3-d with equal batch");
  }
  int64_t inner_b = transpose_b ? b->value.dim(2) : b->value.dim(1);
  if (a->value.dim(2) != inner_b) throw ShapeError("bmm: inner dimension mismatch");
}
}  // namespace

Var bmm(const Var& a, const Var& b) {
  check_bmm(a, b, false);
  const int64_t bs = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2),
                n_ = b->value.dim(2);
  Tensor out({bs, m, n_});
  for (int64_t i = 0; i < bs; ++i) {
    MatMap o(out.data() + i * m * n_, m, n_);
    ConstMatMap am(a->value.data() + i * m * k, m, k);
    ConstMatMap bm(b->value.data() + i * k * n_, k, n_);
    o.noalias() = am * bm;
  }
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Var pa = a, pb = b;
    n->backward_fn = [pa, pb, bs, m, k, n_](Node& self) {
      for (int64_t i = 0; i < bs; ++i) {
        ConstMatMap g(self.grad.data() + i * m * n_, m, n_);
        if (pa->requires_grad) {
          MatMap ga(pa->ensure_grad().data() + i * m * k, m, k);
          ConstMatMap bm(pb->value.data() + i * k * n_, k, n_);
          ga.noalias() += g * bm.transpose();
        }
        if (pb->requires_grad) {
          MatMap gb(pb->ensure_grad().data() + i * k * n_, k, n_);
          ConstMatMap am(pa->value.data() + i * m * k, m, k);
          gb.noalias() += am.transpose() * g;
        }
      }
    };
  }
  return n;
}

Var bmm_nt(const Var& a, const Var& b) {
  check_bmm(a, b, true);
  const int64_t bs = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2),
                n_ = b->value.dim(1);
  Tensor out({bs, m, n_});
  for (int64_t i = 0; i < bs; ++i) {
    MatMap o(out.data() + i * m * n_, m, n_);
    ConstMatMap am(a->value.data() + i * m * k, m, k);
    ConstMatMap bm(b->value.data() + i * n_ * k, n_, k);
    o.noalias() = am * bm.transpose();
  }
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Var pa = a, pb = b;
    n->backward_fn = [pa, pb, bs, m, k, n_](Node& self) {
      for (int64_t i = 0; i < bs; ++i) {
        ConstMatMap g(self.grad.data() + i * m * n_, m, n_);
        if (pa->requires_grad) {
          MatMap ga(pa->ensure_grad().data() + i * m * k, m, k);
          ConstMatMap bm(pb->value.data() + i * n_ * k, n_, k);
          ga.noalias() += g * bm;
        }
        if (pb->requires_grad) {
          MatMap gb(pb->ensure_grad().data() + i * n_ * k, n_, k);
          ConstMatMap am(pa->value.data() + i * m * k, m, k);
          gb.noalias() += g.transpose() * am;
        }
      }
    };
  }
  return n;
}

Var slice_cols(const Var& x, int64_t start, int64_t len) {
  if (x->value.rank() != 2 || start < 0 || start + len > x->value.dim(1)) {
    throw ShapeError("slice_cols: range out of bounds");
  }
  const int64_t m = x->value.dim(0), cols = x->value.dim(1);
  Tensor out({m, len});
  for (int64_t r = 0; r < m; ++r) {
    const double* src = x->value.data() + r * cols + start;
    double* dst = out.data() + r * len;
    std::copy(src, src + len, dst);
  }
  Var n = make_node(std::move(out), {x});
  if (n->requires_grad) {
    Var px = x;
    n->backward_fn = [px, start, len, m, cols](Node& self) {
      Tensor& g = px->ensure_grad();
      for (int64_t r = 0; r < m; ++r) {
        double* dst = g.data() + r * cols + start;
        const double* src = self.grad.data() + r * len;
        for (int64_t c = 0; c < len; ++c) dst[c] += src[c];
      }
    };
  }
  return n;
}

Var concat_cols(const Var& a, const Var& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(0) != b->value.dim(0)) {
    throw ShapeError("concat_cols: row counts must match");
  }
  const int64_t m = a->value.dim(0), p = a->value.dim(1), q = b->value.dim(1);
  Tensor out({m, p + q});
  for (int64_t r = 0; r < m; ++r) {
    std::copy(a->value.data() + r * p, a->value.data() + (r + 1) * p, out.data() + r * (p + q));
    std::copy(b->value.data() + r * q, b->value.data() + (r + 1) * q,
              out.data() + r * (p + q) + p);
  }
  Var n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Var pa = a, pb = b;
    n->backward_fn = [pa, pb, m, p, q](Node& self) {
      if (pa->requires_grad) {
        Tensor& g = pa->ensure_grad();
        for (int64_t r = 0; r < m; ++r)
          for (int64_t c = 0; c < p; ++c) g[r * p + c] += self.grad[r * (p + q) + c];
      }
      if (pb->requires_grad) {
        Tensor& g = pb->ensure_grad();
        for (int64_t r = 0; r < m; ++r)
          for (int64_t c = 0; c < q; ++c) g[r * q + c] += self.grad[r * (p + q) + p + c];
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// reductions / normalization

Var sum_all(const Var& a) {
  double acc = 0.0;
  for (int64_t i = 0; i < a->value.size(); ++i) acc += a->value[i];
  Var n = make_node(Tensor::scalar(acc), {a});
  if (n->requires_grad) {
    Var pa = a;
    n->backward_fn = [pa](Node& self) {
      double g = self.grad[0];
      Tensor& pg = pa->ensure_grad();
      for (int64_t i = 0; i < pg.size(); ++i) pg[i] += g;
    };
  }
  return n;
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.size())); }

Var softmax_last(const Var& a) {
  const int64_t cols = last_dim(a->value), rows = lead_rows(a->value);
  Tensor out = a->value;
  for (int64_t r = 0; r < rows; ++r) {
    double* p = out.data() + r * cols;
    double mx = p[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, p[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      p[c] = std::exp(p[c] - mx);
      sum += p[c];
    }
    for (int64_t c = 0; c < cols; ++c) p[c] /= sum;
  }
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Var pa = a;
    n->backward_fn = [pa, rows, cols](Node& self) {
      Tensor& g = pa->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* s = self.value.data() + r * cols;
        const double* go = self.grad.data() + r * cols;
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) dot += go[c] * s[c];
        double* gi = g.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) gi[c] += s[c] * (go[c] - dot);
      }
    };
  }
  return n;
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int64_t cols = last_dim(x->value), rows = lead_rows(x->value);
  if (gamma->value.size() != cols || beta->value.size() != cols) {
    throw ShapeError("layer_norm: gamma/beta length must match last dim");
  }
  Tensor out(x->value.shape());
  // x_hat retained for backward.
  auto xhat = std::make_shared<Tensor>(x->value.shape());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* p = x->value.data() + r * cols;
    double mean = 0.0;
    for (int64_t c = 0; c < cols; ++c) mean += p[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      double d = p[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = istd;
    double* xh = xhat->data() + r * cols;
    double* o = out.data() + r * cols;
    for (int64_t c = 0; c < cols; ++c) {
      xh[c] = (p[c] - mean) * istd;
      o[c] = xh[c] * gamma->value[c] + beta->value[c];
    }
  }
  Var n = make_node(std::move(out), {x, gamma, beta});
  if (n->requires_grad) {
    Var px = x, pg = gamma, pb = beta;
    n->backward_fn = [px, pg, pb, xhat, inv_std, rows, cols](Node& self) {
      const double inv_cols = 1.0 / static_cast<double>(cols);
      for (int64_t r = 0; r < rows; ++r) {
        const double* go = self.grad.data() + r * cols;
        const double* xh = xhat->data() + r * cols;
        if (pg->requires_grad) {
          Tensor& gg = pg->ensure_grad();
          for (int64_t c = 0; c < cols; ++c) gg[c] += go[c] * xh[c];
        }
        if (pb->requires_grad) {
          Tensor& gb = pb->ensure_grad();
          for (int64_t c = 0; c < cols; ++c) gb[c] += go[c];
        }
        if (px->requires_grad) {
          double istd = (*inv_std)[static_cast<size_t>(r)];
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int64_t c = 0; c < cols; ++c) {
            double dxh = go[c] * pg->value[c];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[c];
          }
          Tensor& gx = px->ensure_grad();
          double* gr = gx.data() + r * cols;
          for (int64_t c = 0; c < cols; ++c) {
            double dxh = go[c] * pg->value[c];
            gr[c] += istd * (dxh - inv_cols * sum_dxhat - xh[c] * inv_cols * sum_dxhat_xhat);
          }
        }
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// shape

Var reshape(const Var& a, std::vector<int64_t> shape) {
  Tensor out = a->value.reshaped(std::move(shape));
  Var n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Var pa = a;
    n->backward_fn = [pa](Node& self) { pa->accumulate_raw(self.grad.data(), self.grad.size()); };
  }
  return n;
}

Var nchw_to_tokens(const Var& x) {
  if (x->value.rank() != 4) throw ShapeError("nchw_to_tokens: expected 4-d input");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int64_t L = H * W;
  Tensor out({N * L, C});
  for (int64_t n_ = 0; n_ < N; ++n_)
    for (int64_t c = 0; c < C; ++c) {
      const double* src = x->value.data() + (n_ * C + c) * L;
      for (int64_t l = 0; l < L; ++l) out[(n_ * L + l) * C + c] = src[l];
    }
  Var n = make_node(std::move(out), {x});
  if (n->requires_grad) {
    Var px = x;
    n->backward_fn = [px, N, C, L](Node& self) {
      Tensor& g = px->ensure_grad();
      for (int64_t n_ = 0; n_ < N; ++n_)
        for (int64_t c = 0; c < C; ++c) {
          double* dst = g.data() + (n_ * C + c) * L;
          for (int64_t l = 0; l < L; ++l) dst[l] += self.grad[(n_ * L + l) * C + c];
        }
    };
  }
  return n;
}

Var tokens_to_nchw(const Var& t, int64_t n_, int64_t c, int64_t h, int64_t w) {
  const int64_t L = h * w;
  if (t->value.rank() != 2 || t->value.dim(0) != n_ * L || t->value.dim(1) != c) {
    throw ShapeError("tokens_to_nchw: token matrix does not match target shape");
  }
  Tensor out({n_, c, h, w});
  for (int64_t b = 0; b < n_; ++b)
    for (int64_t ch = 0; ch < c; ++ch) {
      double* dst = out.data() + (b * c + ch) * L;
      for (int64_t l = 0; l < L; ++l) dst[l] = t->value[(b * L + l) * c + ch];
    }
  Var n = make_node(std::move(out), {t});
  if (n->requires_grad) {
    Var pt = t;
    n->backward_fn = [pt, n_, c, L](Node& self) {
      Tensor& g = pt->ensure_grad();
      for (int64_t b = 0; b < n_; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
          const double* src = self.grad.data() + (b * c + ch) * L;
          for (int64_t l = 0; l < L; ++l) g[(b * L + l) * c + ch] += src[l];
        }
    };
  }
  return n;
}

Var split_heads(const Var& x, int64_t n_, int64_t l, int64_t heads) {
  if (x->value.rank() != 2 || x->value.dim(0) != n_ * l || x->value.dim(1) % heads != 0) {
    throw ShapeError("split_heads: incompatible shape");
  }
  const int64_t dh = x->value.dim(1) / heads;
  Tensor out({n_ * heads, l, dh});
  for (int64_t b = 0; b < n_; ++b)
    for (int64_t hh = 0; hh < heads; ++hh)
      for (int64_t t = 0; t < l; ++t) {
        const double* src = x->value.data() + (b * l + t) * heads * dh + hh * dh;
        double* dst = out.data() + ((b * heads + hh) * l + t) * dh;
        std::copy(src, src + dh, dst);
      }
  Var n = make_node(std::move(out), {x});
  if (n->requires_grad) {
    Var px = x;
    n->backward_fn = [px, n_, l, heads, dh](Node& self) {
      Tensor& g = px->ensure_grad();
      for (int64_t b = 0; b < n_; ++b)
        for (int64_t hh = 0; hh < heads; ++hh)
          for (int64_t t = 0; t < l; ++t) {
            double* dst = g.data() + (b * l + t) * heads * dh + hh * dh;
            const double* src = self.grad.data() + ((b * heads + hh) * l + t) * dh;
            for (int64_t d = 0; d < dh; ++d) dst[d] += src[d];
          }
    };
  }
  return n;
}

Var merge_heads(const Var& x, int64_t n_, int64_t l, int64_t heads) {
  if (x->value.rank() != 3 || x->value.dim(0) != n_ * heads || x->value.dim(1) != l) {
    throw ShapeError("merge_heads: incompatible shape");
  }
  const int64_t dh = x->value.dim(2);
  Tensor out({n_ * l, heads * dh});
  for (int64_t b = 0; b < n_; ++b)
    for (int64_t hh = 0; hh < heads; ++hh)
      for (int64_t t = 0; t < l; ++t) {
        const double* src = x->value.data() + ((b * heads + hh) * l + t) * dh;
        double* dst = out.data() + (b * l + t) * heads * dh + hh * dh;
        std::copy(src, src + dh, dst);
      }
  Var n = make_node(std::move(out), {x});
  if (n->requires_grad) {
    Var px = x;
    n->backward_fn = [px, n_, l, heads, dh](Node& self) {
      Tensor& g = px->ensure_grad();
      for (int64_t b = 0; b < n_; ++b)
        for (int64_t hh = 0; hh < heads; ++hh)
          for (int64_t t = 0; t < l; ++t) {
            double* dst = g.data() + ((b * heads + hh) * l + t) * dh;
            const double* src = self.grad.data() + (b * l + t) * heads * dh + hh * dh;
            for (int64_t d = 0; d < dh; ++d) dst[d] += src[d];
          }
    };
  }
  return n;
}

Var add_tile_rows(const Var& x, const Var& e, int64_t n_) {
  if (x->value.rank() != 2 || e->value.rank() != 2 ||
      x->value.dim(0) != n_ * e->value.dim(0) || x->value.dim(1) != e->value.dim(1)) {
    throw ShapeError("add_tile_rows: incompatible shapes");
  }
  const int64_t l = e->value.dim(0), c = e->value.dim(1);
  Tensor out = x->value;
  for (int64_t b = 0; b < n_; ++b)
    for (int64_t t = 0; t < l; ++t) {
      double* dst = out.data() + (b * l + t) * c;
      const double* src = e->value.data() + t * c;
      for (int64_t k = 0; k < c; ++k) dst[k] += src[k];
    }
  Var n = make_node(std::move(out), {x, e});
  if (n->requires_grad) {
    Var px = x, pe = e;
    n->backward_fn = [px, pe, n_, l, c](Node& self) {
      if (px->requires_grad) px->accumulate(self.grad);
      if (pe->requires_grad) {
        Tensor& g = pe->ensure_grad();
        for (int64_t b = 0; b < n_; ++b)
          for (int64_t t = 0; t < l; ++t) {
            const double* src = self.grad.data() + (b * l + t) * c;
            double* dst = g.data() + t * c;
            for (int64_t k = 0; k < c; ++k) dst[k] += src[k];
          }
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// structured ops

namespace {

struct ConvDims {
  int64_t n, cin, h, w, cout, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad) {
  ConvDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  return d;
}

// im2col: rows = (n, oh, ow), cols = (cin, kh, kw).
void im2col(const Tensor& x, const ConvDims& d, int64_t stride, int64_t pad, Tensor& cols) {
  const int64_t patch = d.cin * d.kh * d.kw;
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t oy = 0; oy < d.oh; ++oy)
      for (int64_t ox = 0; ox < d.ow; ++ox) {
        double* row = cols.data() + ((n * d.oh + oy) * d.ow + ox) * patch;
        int64_t idx = 0;
        for (int64_t c = 0; c < d.cin; ++c)
          for (int64_t ky = 0; ky < d.kh; ++ky)
            for (int64_t kx = 0; kx < d.kw; ++kx, ++idx) {
              int64_t iy = oy * stride + ky - pad;
              int64_t ix = ox * stride + kx - pad;
              row[idx] = (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
                             ? x[((n * d.cin + c) * d.h + iy) * d.w + ix]
                             : 0.0;
            }
      }
}

void col2im_accumulate(const Tensor& cols, const ConvDims& d, int64_t stride, int64_t pad,
                       Tensor& gx) {
  const int64_t patch = d.cin * d.kh * d.kw;
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t oy = 0; oy < d.oh; ++oy)
      for (int64_t ox = 0; ox < d.ow; ++ox) {
        const double* row = cols.data() + ((n * d.oh + oy) * d.ow + ox) * patch;
        int64_t idx = 0;
        for (int64_t c = 0; c < d.cin; ++c)
          for (int64_t ky = 0; ky < d.kh; ++ky)
            for (int64_t kx = 0; kx < d.kw; ++kx, ++idx) {
              int64_t iy = oy * stride + ky - pad;
              int64_t ix = ox * stride + kx - pad;
              if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) {
                gx[((n * d.cin + c) * d.h + iy) * d.w + ix] += row[idx];
              }
            }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, int64_t stride, int64_t pad) {
  if (x->value.rank() != 4 || w->value.rank() != 4 || x->value.dim(1) != w->value.dim(1)) {
    throw ShapeError("conv2d: expected NCHW input and matching OIHW weight");
  }
  ConvDims d = conv_dims(x->value, w->value, stride, pad);
  if (bias->value.size() != d.cout) throw ShapeError("conv2d: bias length must equal out channels");
  const int64_t patch = d.cin * d.kh * d.kw;
  const int64_t rows = d.n * d.oh * d.ow;

  auto cols = std::make_shared<Tensor>(std::vector<int64_t>{rows, patch});
  im2col(x->value, d, stride, pad, *cols);

  // gemm: [rows, patch] x [patch, cout]
  Tensor gemm_out({rows, d.cout});
  as_mat(gemm_out, rows, d.cout).noalias() =
      as_mat(*cols, rows, patch) * as_mat(w->value, d.cout, patch).transpose();

  Tensor out({d.n, d.cout, d.oh, d.ow});
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t oy = 0; oy < d.oh; ++oy)
      for (int64_t ox = 0; ox < d.ow; ++ox) {
        const double* src = gemm_out.data() + ((n * d.oh + oy) * d.ow + ox) * d.cout;
        for (int64_t c = 0; c < d.cout; ++c) {
          out[((n * d.cout + c) * d.oh + oy) * d.ow + ox] = src[c] + bias->value[c];
        }
      }

  Var node = make_node(std::move(out), {x, w, bias});
  if (node->requires_grad) {
    Var px = x, pw = w, pb = bias;
    node->backward_fn = [px, pw, pb, cols, d, stride, pad, rows, patch](Node& self) {
      // Re-pack output grad to gemm layout [rows, cout].
      Tensor grows({rows, d.cout});
      for (int64_t n = 0; n < d.n; ++n)
        for (int64_t oy = 0; oy < d.oh; ++oy)
          for (int64_t ox = 0; ox < d.ow; ++ox) {
            double* dst = grows.data() + ((n * d.oh + oy) * d.ow + ox) * d.cout;
            for (int64_t c = 0; c < d.cout; ++c) {
              dst[c] = self.grad[((n * d.cout + c) * d.oh + oy) * d.ow + ox];
            }
          }
      if (pb->requires_grad) {
        MatMap gb(pb->ensure_grad().data(), 1, d.cout);
        gb.row(0) += as_mat(grows, rows, d.cout).colwise().sum();
      }
      if (pw->requires_grad) {
        MatMap gw(pw->ensure_grad().data(), d.cout, patch);
        gw.noalias() += as_mat(grows, rows, d.cout).transpose() * as_mat(*cols, rows, patch);
      }
      if (px->requires_grad) {
        Tensor gcols({rows, patch});
        as_mat(gcols, rows, patch).noalias() =
            as_mat(grows, rows, d.cout) * as_mat(pw->value, d.cout, patch);
        col2im_accumulate(gcols, d, stride, pad, px->ensure_grad());
      }
    };
  }
  return node;
}

Var global_avg_pool(const Var& x) {
  if (x->value.rank() != 4) throw ShapeError("global_avg_pool: expected NCHW input");
  const int64_t N = x->value.dim(0), C = x->value.dim(1), hw = x->value.dim(2) * x->value.dim(3);
  Tensor out({N, C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* src = x->value.data() + (n * C + c) * hw;
      double acc = 0.0;
      for (int64_t i = 0; i < hw; ++i) acc += src[i];
      out[n * C + c] = acc / static_cast<double>(hw);
    }
  Var node = make_node(std::move(out), {x});
  if (node->requires_grad) {
    Var px = x;
    node->backward_fn = [px, N, C, hw](Node& self) {
      Tensor& g = px->ensure_grad();
      const double inv = 1.0 / static_cast<double>(hw);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          double gv = self.grad[n * C + c] * inv;
          double* dst = g.data() + (n * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) dst[i] += gv;
        }
    };
  }
  return node;
}

Var channel_scale(const Var& x, const Var& w) {
  if (x->value.rank() != 4 || w->value.rank() != 2 || w->value.dim(0) != x->value.dim(0) ||
      w->value.dim(1) != x->value.dim(1)) {
    throw ShapeError("channel_scale: weights must be [N,C] matching the feature");
  }
  const int64_t N = x->value.dim(0), C = x->value.dim(1), hw = x->value.dim(2) * x->value.dim(3);
  Tensor out = x->value;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double s = w->value[n * C + c];
      double* dst = out.data() + (n * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] *= s;
    }
  Var node = make_node(std::move(out), {x, w});
  if (node->requires_grad) {
    Var px = x, pw = w;
    node->backward_fn = [px, pw, N, C, hw](Node& self) {
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const double* go = self.grad.data() + (n * C + c) * hw;
          if (px->requires_grad) {
            double s = pw->value[n * C + c];
            double* gx = px->ensure_grad().data() + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) gx[i] += go[i] * s;
          }
          if (pw->requires_grad) {
            const double* xv = px->value.data() + (n * C + c) * hw;
            double acc = 0.0;
            for (int64_t i = 0; i < hw; ++i) acc += go[i] * xv[i];
            pw->ensure_grad()[n * C + c] += acc;
          }
        }
    };
  }
  return node;
}

Var power_normalize_rows(const Var& x) {
  if (x->value.rank() != 2) throw ShapeError("power_normalize_rows: expected 2-d input");
  const int64_t N = x->value.dim(0), D = x->value.dim(1);
  Tensor out = x->value;
  auto inv_rms = std::make_shared<std::vector<double>>(static_cast<size_t>(N));
  for (int64_t n = 0; n < N; ++n) {
    double* p = out.data() + n * D;
    double m = 0.0;
    for (int64_t i = 0; i < D; ++i) m += p[i] * p[i];
    m /= static_cast<double>(D);
    if (m == 0.0) {
      throw DegenerateInputError("power normalization of an all-zero feature");
    }
    double s = 1.0 / std::sqrt(m);
    (*inv_rms)[static_cast<size_t>(n)] = s;
    for (int64_t i = 0; i < D; ++i) p[i] *= s;
  }
  Var node = make_node(std::move(out), {x});
  if (node->requires_grad) {
    Var px = x;
    node->backward_fn = [px, inv_rms, N, D](Node& self) {
      Tensor& g = px->ensure_grad();
      for (int64_t n = 0; n < N; ++n) {
        const double* go = self.grad.data() + n * D;
        const double* xv = px->value.data() + n * D;
        double s = (*inv_rms)[static_cast<size_t>(n)];
        double dot = 0.0;
        for (int64_t i = 0; i < D; ++i) dot += go[i] * xv[i];
        // y = x * s, s = (mean x^2)^{-1/2}
        // dx_k = s*g_k - s^3/D * x_k * <g, x>
        double coef = s * s * s / static_cast<double>(D) * dot;
        double* gr = g.data() + n * D;
        for (int64_t i = 0; i < D; ++i) gr[i] += s * go[i] - coef * xv[i];
      }
    };
  }
  return node;
}

Var sqdist_matrix(const Var& x, const Var& m) {
  if (x->value.rank() != 2 || m->value.rank() != 2 || x->value.dim(1) != m->value.dim(1) ||
      x->value.dim(0) != m->value.dim(0)) {
    throw ShapeError("sqdist_matrix: operands must both be [N,D]");
  }
  const int64_t N = x->value.dim(0), D = x->value.dim(1);
  Tensor out({N, N});
  // Plain loops on purpose: identical m_j rows must give bit-identical S[n][j]
  // across j (downstream exactness relies on it), which a blocked gemm
  // factorization would not guarantee.
  for (int64_t n_ = 0; n_ < N; ++n_) {
    const double* xr = x->value.data() + n_ * D;
    for (int64_t j = 0; j < N; ++j) {
      const double* mr = m->value.data() + j * D;
      double acc = 0.0;
      for (int64_t d = 0; d < D; ++d) {
        double diff = xr[d] - mr[d];
        acc += diff * diff;
      }
      out[n_ * N + j] = acc;
    }
  }
  Var node = make_node(std::move(out), {x, m});
  if (node->requires_grad) {
    Var px = x, pm = m;
    node->backward_fn = [px, pm, N, D](Node& self) {
      ConstMatMap g(self.grad.data(), N, N);
      ConstMatMap xm(px->value.data(), N, D);
      ConstMatMap mm(pm->value.data(), N, D);
      // dS[n][j]/dx_n = 2(x_n - m_j); dS[n][j]/dm_j = -2(x_n - m_j)
      if (px->requires_grad) {
        MatMap gx(px->ensure_grad().data(), N, D);
        Eigen::VectorXd rowsum = g.rowwise().sum();
        gx.noalias() += 2.0 * (rowsum.asDiagonal() * xm - g * mm);
      }
      if (pm->requires_grad) {
        MatMap gm(pm->ensure_grad().data(), N, D);
        Eigen::VectorXd colsum = g.colwise().sum();
        gm.noalias() += 2.0 * (colsum.asDiagonal() * mm - g.transpose() * xm);
      }
    };
  }
  return node;
}

Var diag_minus_bcast(const Var& s) {
  if (s->value.rank() != 2 || s->value.dim(0) != s->value.dim(1)) {
    throw ShapeError("diag_minus_bcast: expected a square matrix");
  }
  const int64_t N = s->value.dim(0);
  Tensor out({N, N});
  for (int64_t n = 0; n < N; ++n) {
    double diag = s->value[n * N + n];
    for (int64_t j = 0; j < N; ++j) out[n * N + j] = diag - s->value[n * N + j];
  }
  Var node = make_node(std::move(out), {s});
  if (node->requires_grad) {
    Var ps = s;
    node->backward_fn = [ps, N](Node& self) {
      Tensor& g = ps->ensure_grad();
      for (int64_t n = 0; n < N; ++n) {
        double row_acc = 0.0;
        for (int64_t j = 0; j < N; ++j) {
          double gv = self.grad[n * N + j];
          row_acc += gv;
          g[n * N + j] -= gv;
        }
        g[n * N + n] += row_acc;
      }
    };
  }
  return node;
}

}  // namespace semdistill::ad
