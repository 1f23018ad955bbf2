#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "semdistill/autodiff.hpp"
#include "testutil.hpp"

using namespace semdistill;
using namespace semdistill::ad;
using semdistill::testutil::grad_check;

namespace {

Var weighted_sum(const Var& y, const Tensor& w) { return sum_all(mul(y, constant(w))); }

Tensor rand_tensor(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), rng, stddev);
}

constexpr double kGradTol = 1e-6;

}  // namespace

TEST_CASE("elementwise arithmetic gradients") {
  Rng rng(11);
  Var a = leaf(rand_tensor({3, 4}, rng), true);
  Var b = leaf(rand_tensor({3, 4}, rng), true);
  Tensor w = rand_tensor({3, 4}, rng);
  auto build = [&] {
    Var t = add(mul(a, b), scale(sub(a, b), 0.7));
    t = add_scalar(neg(t), 0.25);
    return weighted_sum(t, w);
  };
  auto res = grad_check({a, b}, build);
  CHECK(res.checked == 24);
  CHECK(res.max_rel_err < kGradTol);
}

TEST_CASE("exp log clamp gradients") {
  Rng rng(12);
  Var a = leaf(rand_tensor({2, 5}, rng, 0.5), true);
  Tensor w = rand_tensor({2, 5}, rng);
  auto build = [&] {
    Var e = exp_of(a);
    Var l = log_of(add_scalar(e, 1.0));
    // Keep every element at least 0.05 away from the clamp kink.
    Var c = clamp_min(scale(a, 2.0), -10.0);
    return weighted_sum(add(l, c), w);
  };
  auto res = grad_check({a}, build);
  CHECK(res.max_rel_err < kGradTol);
}

TEST_CASE("gelu and sigmoid gradients") {
  Rng rng(13);
  Var a = leaf(rand_tensor({4, 3}, rng), true);
  Tensor w = rand_tensor({4, 3}, rng);
  auto build_g = [&] { return weighted_sum(gelu(a), w); };
  CHECK(grad_check({a}, build_g).max_rel_err < kGradTol);
  auto build_s = [&] { return weighted_sum(sigmoid(a), w); };
  CHECK(grad_check({a}, build_s).max_rel_err < kGradTol);
}

TEST_CASE("scalar broadcast ops") {
  Rng rng(14);
  Var a = leaf(rand_tensor({3, 3}, rng), true);
  Var s = leaf(Tensor::scalar(0.8), true);
  Tensor w = rand_tensor({3, 3}, rng);
  auto build = [&] { return weighted_sum(add_scalar_var(mul_scalar_var(a, s), s), w); };
  auto res = grad_check({a, s}, build);
  CHECK(res.checked == 10);
  CHECK(res.max_rel_err < kGradTol);
}

TEST_CASE("matmul value and gradient") {
  Rng rng(15);
  Var a = leaf(rand_tensor({3, 4}, rng), true);
  Var b = leaf(rand_tensor({4, 2}, rng), true);
  Var bias = leaf(rand_tensor({2}, rng), true);
  Var y = add_rowvec(matmul(a, b), bias);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 2; ++j) {
      double acc = bias->value[j];
      for (int64_t k = 0; k < 4; ++k) acc += a->value[i * 4 + k] * b->value[k * 2 + j];
      CHECK(y->value[i * 2 + j] == doctest::Approx(acc).epsilon(1e-12));
    }
  Tensor w = rand_tensor({3, 2}, rng);
  auto build = [&] { return weighted_sum(add_rowvec(matmul(a, b), bias), w); };
  CHECK(grad_check({a, b, bias}, build).max_rel_err < kGradTol);
}

TEST_CASE("batched matmul value and gradient") {
  Rng rng(16);
  Var a = leaf(rand_tensor({2, 3, 4}, rng), true);
  Var b = leaf(rand_tensor({2, 4, 3}, rng), true);
  Var y = bmm(a, b);
  // bmm_nt(a, c) with c = b^T per batch must match bmm(a, b).
  Tensor bt({2, 3, 4});
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t r = 0; r < 4; ++r)
      for (int64_t c = 0; c < 3; ++c) bt[(i * 3 + c) * 4 + r] = b->value[(i * 4 + r) * 3 + c];
  Var y2 = bmm_nt(a, constant(bt));
  for (int64_t i = 0; i < y->value.size(); ++i) {
    CHECK(y->value[i] == doctest::Approx(y2->value[i]).epsilon(1e-12));
  }
  Tensor w = rand_tensor({2, 3, 3}, rng);
  auto build = [&] { return weighted_sum(bmm(a, b), w); };
  CHECK(grad_check({a, b}, build).max_rel_err < kGradTol);
  Var c = leaf(bt, true);
  auto build_nt = [&] { return weighted_sum(bmm_nt(a, c), w); };
  CHECK(grad_check({a, c}, build_nt).max_rel_err < kGradTol);
}

TEST_CASE("slice and concat columns") {
  Rng rng(17);
  Var a = leaf(rand_tensor({3, 4}, rng), true);
  Var b = leaf(rand_tensor({3, 2}, rng), true);
  Var cat = concat_cols(a, b);
  Var back = slice_cols(cat, 0, 4);
  for (int64_t i = 0; i < a->value.size(); ++i) CHECK(back->value[i] == a->value[i]);
  Var tail = slice_cols(cat, 4, 2);
  for (int64_t i = 0; i < b->value.size(); ++i) CHECK(tail->value[i] == b->value[i]);
  Tensor w = rand_tensor({3, 6}, rng);
  auto build = [&] { return weighted_sum(concat_cols(a, b), w); };
  CHECK(grad_check({a, b}, build).max_rel_err < kGradTol);
  Tensor w2 = rand_tensor({3, 3}, rng);
  auto build2 = [&] { return weighted_sum(slice_cols(concat_cols(a, b), 2, 3), w2); };
  CHECK(grad_check({a, b}, build2).max_rel_err < kGradTol);
}

TEST_CASE("softmax rows sum to one and gradient") {
  Rng rng(18);
  Var a = leaf(rand_tensor({5, 7}, rng, 2.0), true);
  Var s = softmax_last(a);
  for (int64_t r = 0; r < 5; ++r) {
    double acc = 0.0;
    for (int64_t c = 0; c < 7; ++c) acc += s->value[r * 7 + c];
    CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
  }
  // Shift invariance.
  Var s2 = softmax_last(add_scalar(a, 37.5));
  for (int64_t i = 0; i < s->value.size(); ++i) {
    CHECK(s->value[i] == doctest::Approx(s2->value[i]).epsilon(1e-12));
  }
  Tensor w = rand_tensor({5, 7}, rng);
  auto build = [&] { return weighted_sum(softmax_last(a), w); };
  CHECK(grad_check({a}, build).max_rel_err < kGradTol);
}

TEST_CASE("layer norm statistics and gradient") {
  Rng rng(19);
  Var x = leaf(rand_tensor({4, 6}, rng, 3.0), true);
  Var gamma = leaf(Tensor::full({6}, 1.0), true);
  Var beta = leaf(Tensor::zeros({6}), true);
  Var y = layer_norm(x, gamma, beta);
  for (int64_t r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (int64_t c = 0; c < 6; ++c) mean += y->value[r * 6 + c];
    mean /= 6.0;
    for (int64_t c = 0; c < 6; ++c) {
      double d = y->value[r * 6 + c] - mean;
      var += d * d;
    }
    var /= 6.0;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
  Tensor w = rand_tensor({4, 6}, rng);
  auto build = [&] { return weighted_sum(layer_norm(x, gamma, beta), w); };
  CHECK(grad_check({x, gamma, beta}, build).max_rel_err < kGradTol);
}

TEST_CASE("shape ops roundtrip and gradients") {
  Rng rng(20);
  Var x = leaf(rand_tensor({2, 3, 4, 4}, rng), true);
  Var tok = nchw_to_tokens(x);
  CHECK(tok->value.shape() == std::vector<int64_t>{32, 3});
  Var back = tokens_to_nchw(tok, 2, 3, 4, 4);
  for (int64_t i = 0; i < x->value.size(); ++i) CHECK(back->value[i] == x->value[i]);

  Var flat = reshape(x, {2, 48});
  CHECK(flat->value.size() == x->value.size());

  Tensor w = rand_tensor({32, 3}, rng);
  auto build = [&] { return weighted_sum(nchw_to_tokens(x), w); };
  CHECK(grad_check({x}, build).max_rel_err < kGradTol);
  Tensor w4 = rand_tensor({2, 3, 4, 4}, rng);
  auto build2 = [&] { return weighted_sum(tokens_to_nchw(nchw_to_tokens(x), 2, 3, 4, 4), w4); };
  CHECK(grad_check({x}, build2).max_rel_err < kGradTol);
}

TEST_CASE("head split and merge") {
  Rng rng(21);
  const int64_t N = 2, L = 5, H = 3, dh = 4;
  Var x = leaf(rand_tensor({N * L, H * dh}, rng), true);
  Var split = split_heads(x, N, L, H);
  CHECK(split->value.shape() == std::vector<int64_t>{N * H, L, dh});
  // Element (n, l, h, d) must land at batch n*H+h, row l, col d.
  for (int64_t n = 0; n < N; ++n)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t d = 0; d < dh; ++d) {
          double src = x->value[(n * L + l) * H * dh + h * dh + d];
          double dst = split->value[((n * H + h) * L + l) * dh + d];
          CHECK(src == dst);
        }
  Var merged = merge_heads(split, N, L, H);
  for (int64_t i = 0; i < x->value.size(); ++i) CHECK(merged->value[i] == x->value[i]);
  Tensor w = rand_tensor({N * H, L, dh}, rng);
  auto build = [&] { return weighted_sum(split_heads(x, N, L, H), w); };
  CHECK(grad_check({x}, build).max_rel_err < kGradTol);
}

TEST_CASE("positional embedding add") {
  Rng rng(22);
  const int64_t N = 3, L = 4, C = 5;
  Var x = leaf(rand_tensor({N * L, C}, rng), true);
  Var e = leaf(rand_tensor({L, C}, rng), true);
  Var y = add_tile_rows(x, e, N);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t c = 0; c < C; ++c) {
        CHECK(y->value[(n * L + l) * C + c] ==
              doctest::Approx(x->value[(n * L + l) * C + c] + e->value[l * C + c]));
      }
  Tensor w = rand_tensor({N * L, C}, rng);
  auto build = [&] { return weighted_sum(add_tile_rows(x, e, N), w); };
  CHECK(grad_check({x, e}, build).max_rel_err < kGradTol);
}

TEST_CASE("conv2d matches direct convolution") {
  Rng rng(23);
  const int64_t N = 2, Cin = 3, H = 5, W = 5, Cout = 4, K = 3, stride = 2, pad = 1;
  Var x = leaf(rand_tensor({N, Cin, H, W}, rng), true);
  Var wgt = leaf(rand_tensor({Cout, Cin, K, K}, rng), true);
  Var bias = leaf(rand_tensor({Cout}, rng), true);
  Var y = conv2d(x, wgt, bias, stride, pad);
  const int64_t OH = (H + 2 * pad - K) / stride + 1;
  const int64_t OW = (W + 2 * pad - K) / stride + 1;
  CHECK(y->value.shape() == std::vector<int64_t>{N, Cout, OH, OW});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          double acc = bias->value[co];
          for (int64_t ci = 0; ci < Cin; ++ci)
            for (int64_t ky = 0; ky < K; ++ky)
              for (int64_t kx = 0; kx < K; ++kx) {
                int64_t iy = oy * stride + ky - pad;
                int64_t ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x->value[((n * Cin + ci) * H + iy) * W + ix] *
                       wgt->value[((co * Cin + ci) * K + ky) * K + kx];
              }
          CHECK(y->value[((n * Cout + co) * OH + oy) * OW + ox] ==
                doctest::Approx(acc).epsilon(1e-12));
        }
  Tensor w = rand_tensor({N, Cout, OH, OW}, rng);
  auto build = [&] { return weighted_sum(conv2d(x, wgt, bias, stride, pad), w); };
  CHECK(grad_check({x, wgt, bias}, build).max_rel_err < kGradTol);
}

TEST_CASE("global average pool and channel scale") {
  Rng rng(24);
  const int64_t N = 2, C = 3, H = 4, W = 4;
  Var x = leaf(rand_tensor({N, C, H, W}, rng), true);
  Var p = global_avg_pool(x);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int64_t i = 0; i < H * W; ++i) acc += x->value[(n * C + c) * H * W + i];
      CHECK(p->value[n * C + c] == doctest::Approx(acc / (H * W)).epsilon(1e-12));
    }
  Var s = leaf(rand_tensor({N, C}, rng), true);
  Tensor w = rand_tensor({N, C, H, W}, rng);
  auto build = [&] { return weighted_sum(channel_scale(x, s), w); };
  CHECK(grad_check({x, s}, build).max_rel_err < kGradTol);
  Tensor w2 = rand_tensor({N, C}, rng);
  auto build2 = [&] { return weighted_sum(global_avg_pool(x), w2); };
  CHECK(grad_check({x}, build2).max_rel_err < kGradTol);
}

TEST_CASE("power normalization yields unit mean square") {
  Rng rng(25);
  Var x = leaf(rand_tensor({4, 8}, rng, 3.0), true);
  Var y = power_normalize_rows(x);
  for (int64_t r = 0; r < 4; ++r) {
    double m = 0.0;
    for (int64_t c = 0; c < 8; ++c) m += y->value[r * 8 + c] * y->value[r * 8 + c];
    CHECK(m / 8.0 == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor w = rand_tensor({4, 8}, rng);
  auto build = [&] { return weighted_sum(power_normalize_rows(x), w); };
  CHECK(grad_check({x}, build).max_rel_err < kGradTol);

  Var z = leaf(Tensor::zeros({2, 4}), false);
  CHECK_THROWS_AS(power_normalize_rows(z), DegenerateInputError);
}

TEST_CASE("squared distance matrix") {
  Rng rng(26);
  const int64_t N = 5, D = 3;
  Var x = leaf(rand_tensor({N, D}, rng), true);
  Var m = leaf(rand_tensor({N, D}, rng), true);
  Var s = sqdist_matrix(x, m);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t j = 0; j < N; ++j) {
      double acc = 0.0;
      for (int64_t d = 0; d < D; ++d) {
        double diff = x->value[n * D + d] - m->value[j * D + d];
        acc += diff * diff;
      }
      CHECK(s->value[n * N + j] == doctest::Approx(acc).epsilon(1e-10));
    }
  Tensor w = rand_tensor({N, N}, rng);
  auto build = [&] { return weighted_sum(sqdist_matrix(x, m), w); };
  CHECK(grad_check({x, m}, build).max_rel_err < kGradTol);
}

TEST_CASE("diag minus broadcast is exactly zero on constant rows") {
  Rng rng(27);
  const int64_t N = 4;
  // Rows whose entries all equal the diagonal entry bit-for-bit.
  Tensor sv({N, N});
  for (int64_t n = 0; n < N; ++n) {
    double v = rng.normal() * 1e3;
    for (int64_t j = 0; j < N; ++j) sv[n * N + j] = v;
  }
  Var t = diag_minus_bcast(leaf(sv, false));
  for (int64_t i = 0; i < t->value.size(); ++i) CHECK(t->value[i] == 0.0);

  Var s = leaf(Tensor::randn({N, N}, rng), true);
  Var t2 = diag_minus_bcast(s);
  for (int64_t n = 0; n < N; ++n) CHECK(t2->value[n * N + n] == 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t j = 0; j < N; ++j) {
      CHECK(t2->value[n * N + j] ==
            doctest::Approx(s->value[n * N + n] - s->value[n * N + j]).epsilon(1e-12));
    }
  Tensor w = rand_tensor({N, N}, rng);
  auto build = [&] { return weighted_sum(diag_minus_bcast(s), w); };
  CHECK(grad_check({s}, build).max_rel_err < kGradTol);
}

TEST_CASE("shared subexpressions accumulate gradients once per use") {
  Var a = leaf(Tensor::full({3}, 2.0), true);
  // t = a + a; y = sum(t * t) = sum(4 a^2); dy/da = 8 a = 16.
  Var t = add(a, a);
  Var y = sum_all(mul(t, t));
  backward(y);
  CHECK(y->value[0] == doctest::Approx(48.0));
  for (int64_t i = 0; i < 3; ++i) CHECK(a->grad[i] == doctest::Approx(16.0));
}

TEST_CASE("backward rejects non-scalar roots") {
  Var a = leaf(Tensor::full({2, 2}, 1.0), true);
  CHECK_THROWS_AS(backward(add(a, a)), ShapeError);
}

TEST_CASE("mean over all elements") {
  Rng rng(28);
  Var a = leaf(rand_tensor({3, 5}, rng), true);
  Var m = mean_all(a);
  double acc = 0.0;
  for (int64_t i = 0; i < a->value.size(); ++i) acc += a->value[i];
  CHECK(m->value[0] == doctest::Approx(acc / 15.0).epsilon(1e-12));
  auto build = [&] { return mean_all(a); };
  CHECK(grad_check({a}, build).max_rel_err < kGradTol);
}
