#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "semdistill/ib_loss.hpp"
#include "semdistill/model.hpp"
#include "testutil.hpp"

using namespace semdistill;
using semdistill::testutil::grad_check;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Literal two-sum evaluation of the Monte Carlo bound, using only the scalar
// density: (1/N) sum_n log p(x_n|i_n) - (1/N^2) sum_n sum_j log p(x_n|i_j).
double mi_brute_force(const Tensor& means, const Tensor& samples, double log_variance) {
  const int64_t n = means.dim(0), d = means.dim(1);
  double diag = 0.0, cross = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    Tensor xi({d});
    for (int64_t t = 0; t < d; ++t) xi[t] = samples[i * d + t];
    for (int64_t j = 0; j < n; ++j) {
      StochasticEncoderDensity dj;
      dj.mean = Tensor({d});
      for (int64_t t = 0; t < d; ++t) dj.mean[t] = means[j * d + t];
      dj.log_variance = log_variance;
      double lp = gaussian_log_density(xi, dj);
      if (i == j) diag += lp;
      cross += lp;
    }
  }
  return diag / double(n) - cross / (double(n) * double(n));
}

std::vector<double> normalized(std::vector<double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  for (double& x : v) x /= s;
  return v;
}

}  // namespace

TEST_CASE("gaussian log density closed forms") {
  const int64_t d = 6;
  StochasticEncoderDensity den;
  den.mean = Tensor::full({d}, 0.3);
  den.log_variance = 0.0;
  CHECK(gaussian_log_density(den.mean, den) ==
        doctest::Approx(-0.5 * double(d) * kLog2Pi).epsilon(1e-12));

  Tensor shifted = Tensor::full({d}, 1.3);
  CHECK(gaussian_log_density(shifted, den) ==
        doctest::Approx(-0.5 * double(d) * kLog2Pi - 0.5 * double(d)).epsilon(1e-12));

  Tensor up = Tensor::full({d}, 0.3 + 0.37), down = Tensor::full({d}, 0.3 - 0.37);
  CHECK(gaussian_log_density(up, den) ==
        doctest::Approx(gaussian_log_density(down, den)).epsilon(1e-12));

  den.log_variance = -1e6;  // variance underflows to zero
  CHECK_THROWS_AS(gaussian_log_density(shifted, den), InvalidArgumentError);

  StochasticEncoderDensity bad;
  bad.mean = Tensor::zeros({3});
  CHECK_THROWS_AS(gaussian_log_density(Tensor::zeros({4}), bad), ShapeError);
}

TEST_CASE("mi bound degenerates to exactly zero") {
  Rng rng(301);
  // N = 1: both terms coincide.
  Tensor m1 = Tensor::randn({1, 5}, rng);
  Tensor x1 = Tensor::randn({1, 5}, rng);
  CHECK(mi_upper_bound(m1, x1, 0.3) == 0.0);

  // Input-independent density: one mean row replicated.
  const int64_t n = 6, d = 4;
  Tensor means({n, d});
  for (int64_t t = 0; t < d; ++t) {
    double v = rng.normal() * 50.0;
    for (int64_t i = 0; i < n; ++i) means[i * d + t] = v;
  }
  Tensor samples = Tensor::randn({n, d}, rng, 3.0);
  CHECK(mi_upper_bound(means, samples, -0.7) == 0.0);

  CHECK_THROWS_AS(mi_upper_bound(Tensor({0, 3}), Tensor({0, 3}), 0.0), InvalidArgumentError);
}

TEST_CASE("mi bound matches the brute-force double loop") {
  Rng rng(302);
  for (int trial = 0; trial < 50; ++trial) {
    int64_t n = 2 + int64_t(rng.uniform_int(7));
    int64_t d = 1 + int64_t(rng.uniform_int(12));
    double lv = rng.uniform(-1.5, 1.5);
    Tensor means = Tensor::randn({n, d}, rng, 2.0);
    Tensor samples = Tensor::randn({n, d}, rng, 2.0);
    double fast = mi_upper_bound(means, samples, lv);
    double brute = mi_brute_force(means, samples, lv);
    CHECK(std::abs(fast - brute) < 1e-6);
  }
}

TEST_CASE("mi bound is invariant under batch permutation") {
  Rng rng(303);
  const int64_t n = 7, d = 5;
  Tensor means = Tensor::randn({n, d}, rng);
  Tensor samples = Tensor::randn({n, d}, rng);
  double base = mi_upper_bound(means, samples, 0.2);
  std::vector<int64_t> perm{3, 0, 6, 1, 5, 2, 4};
  Tensor pm({n, d}), ps({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t t = 0; t < d; ++t) {
      pm[i * d + t] = means[perm[size_t(i)] * d + t];
      ps[i * d + t] = samples[perm[size_t(i)] * d + t];
    }
  CHECK(mi_upper_bound(pm, ps, 0.2) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("mi graph agrees with the plain function and is differentiable") {
  Rng rng(304);
  const int64_t n = 5, d = 4;
  ad::Var means = ad::leaf(Tensor::randn({n, d}, rng), true);
  ad::Var samples = ad::leaf(Tensor::randn({n, d}, rng), true);
  ad::Var lv = ad::leaf(Tensor::scalar(0.4), true);
  ad::Var mi = mi_upper_bound_graph(means, samples, lv);
  CHECK(mi->value[0] ==
        doctest::Approx(mi_upper_bound(means->value, samples->value, 0.4)).epsilon(1e-12));

  auto build = [&] { return mi_upper_bound_graph(means, samples, lv); };
  auto res = grad_check({means, samples, lv}, build);
  CHECK(res.max_rel_err < 1e-6);

  // Exact zero cases carry over to the graph form.
  Tensor const_means({3, 2});
  for (int64_t i = 0; i < 3; ++i) {
    const_means[i * 2] = 1.25;
    const_means[i * 2 + 1] = -7.5;
  }
  ad::Var cm = ad::leaf(const_means, true);
  ad::Var cs = ad::leaf(Tensor::randn({3, 2}, rng), true);
  CHECK(mi_upper_bound_graph(cm, cs, lv)->value[0] == 0.0);
  ad::Var one_m = ad::leaf(Tensor::randn({1, 4}, rng), true);
  ad::Var one_s = ad::leaf(Tensor::randn({1, 4}, rng), true);
  CHECK(mi_upper_bound_graph(one_m, one_s, lv)->value[0] == 0.0);
}

TEST_CASE("reparameterized samples scale with the learned deviation") {
  Rng rng(305);
  ad::Var means = ad::leaf(Tensor::randn({3, 4}, rng), true);
  ad::Var lv = ad::leaf(Tensor::scalar(-0.6), true);
  Tensor eps = Tensor::randn({3, 4}, rng);
  ad::Var x = reparameterize(means, lv, eps);
  double sigma = std::exp(-0.3);
  for (int64_t i = 0; i < x->value.size(); ++i) {
    CHECK(x->value[i] == doctest::Approx(means->value[i] + sigma * eps[i]).epsilon(1e-12));
  }
  Tensor w = Tensor::randn({3, 4}, rng);
  auto build = [&] { return ad::sum_all(ad::mul(reparameterize(means, lv, eps), ad::constant(w))); };
  CHECK(grad_check({means, lv}, build).max_rel_err < 1e-6);
}

TEST_CASE("soft cross entropy closed forms") {
  std::vector<double> onehot{0.0, 1.0, 0.0, 0.0};
  std::vector<double> p{0.2, 0.5, 0.2, 0.1};
  CHECK(soft_cross_entropy(p, onehot) == doctest::Approx(-std::log(0.5)).epsilon(1e-12));

  std::vector<double> u(4, 0.25);
  CHECK(soft_cross_entropy(u, u) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  CHECK_THROWS_AS(soft_cross_entropy({0.5, 0.5}, {0.2, 0.3, 0.5}), ShapeError);
  CHECK_THROWS_AS(soft_cross_entropy({0.9, 0.3}, {0.5, 0.5}), InvalidArgumentError);
}

TEST_CASE("uniform targets are minimized by the uniform prediction") {
  std::vector<double> y{0.5, 0.5};
  double at_uniform = soft_cross_entropy({0.5, 0.5}, y);
  for (double p = 0.05; p <= 0.951; p += 0.05) {
    double ce = soft_cross_entropy({p, 1.0 - p}, y);
    if (std::abs(p - 0.5) > 1e-9) CHECK(ce > at_uniform);
  }
}

TEST_CASE("gibbs inequality on randomized pairs") {
  Rng rng(306);
  for (int trial = 0; trial < 100; ++trial) {
    int64_t c = 2 + int64_t(rng.uniform_int(10));
    std::vector<double> y(static_cast<size_t>(c)), p(static_cast<size_t>(c));
    for (auto& v : y) v = rng.uniform() + 1e-3;
    for (auto& v : p) v = rng.uniform() + 1e-3;
    y = normalized(y);
    p = normalized(p);
    double entropy = soft_cross_entropy(y, y);
    CHECK(soft_cross_entropy(p, y) >= entropy - 1e-8);
  }
  // Equality at p == y.
  std::vector<double> y = normalized({1.0, 2.0, 3.0});
  CHECK(soft_cross_entropy(y, y) == doctest::Approx(soft_cross_entropy(y, y)));
}

TEST_CASE("loss graph decouples rate and distortion") {
  Rng rng(307);
  const int64_t n = 4, d = 6, c = 5;
  ad::Var means = ad::leaf(Tensor::randn({n, d}, rng), true);
  ad::Var lv = ad::leaf(Tensor::scalar(0.0), true);
  Tensor eps = Tensor::randn({n, d}, rng);
  ad::Var samples = reparameterize(means, lv, eps);
  Rng prng(308);
  Tensor logits = Tensor::randn({n, c}, prng);
  ad::Var probs = ad::softmax_last(ad::leaf(logits, true));
  Tensor yhat({n, c});
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<size_t>(c));
    for (auto& v : row) v = prng.uniform() + 0.1;
    row = normalized(row);
    for (int64_t k = 0; k < c; ++k) yhat[i * c + k] = row[size_t(k)];
  }

  auto g0 = distillation_loss_graph(means, samples, lv, probs, yhat, 0.0);
  CHECK(g0.total->value[0] == g0.rate->value[0]);

  auto g2 = distillation_loss_graph(means, samples, lv, probs, yhat, 2.0);
  CHECK(g2.total->value[0] ==
        doctest::Approx(g2.rate->value[0] + 2.0 * g2.distortion->value[0]).epsilon(1e-12));

  // Rate forced to zero by a constant mean: total is beta times the mean
  // soft cross-entropy.
  Tensor cmean({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t t = 0; t < d; ++t) cmean[i * d + t] = 0.8;
  ad::Var cm = ad::leaf(cmean, true);
  auto gz = distillation_loss_graph(cm, samples, lv, probs, yhat, 3.0);
  CHECK(gz.rate->value[0] == 0.0);
  CHECK(gz.total->value[0] == doctest::Approx(3.0 * gz.distortion->value[0]).epsilon(1e-12));

  auto b = g2.breakdown(2.0);
  CHECK(b.beta == 2.0);
  CHECK(b.total == doctest::Approx(b.rate + b.beta * b.distortion).epsilon(1e-12));

  // Larger beta strictly raises the distortion share for the same graph inputs.
  auto g5 = distillation_loss_graph(means, samples, lv, probs, yhat, 5.0);
  CHECK(g5.total->value[0] - g5.rate->value[0] >
        g2.total->value[0] - g2.rate->value[0]);
}

TEST_CASE("full distillation loss gradients through model and channel") {
  EncoderConfig cfg;
  cfg.in_channels = 3;
  cfg.in_h = 8;
  cfg.in_w = 8;
  cfg.stage_widths = {4, 4, 4, 4};
  cfg.heads = 2;
  cfg.decoder_hidden = 6;
  cfg.class_count = 3;
  StudentModel model(cfg, 61);
  Rng rng(309);
  const int64_t n = 3;
  Tensor imgs = Tensor::randn({n, 3, 8, 8}, rng, 0.5);
  Tensor yhat({n, int64_t(cfg.class_count)});
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> row{0.6, 0.3, 0.1};
    for (int64_t k = 0; k < cfg.class_count; ++k) yhat[i * cfg.class_count + k] = row[size_t(k)];
  }
  Tensor eps = Tensor::randn({n, cfg.feature_dim()}, rng);

  auto build = [&] {
    Rng noise(404);
    auto g = model.forward_graph(imgs, 2.0, awgn_state(2.0), noise);
    ad::Var samples = reparameterize(g.x_rows, model.log_variance(), eps);
    auto loss = distillation_loss_graph(g.x_rows, samples, model.log_variance(), g.probs, yhat,
                                        1.5);
    return loss.total;
  };
  std::vector<ad::Var> leaves = {
      model.params().find("patch2.w"), model.params().find("stage0.block.fc1.w"),
      model.params().find("adapt.fc2.w"), model.params().find("decoder.fc1.w"),
      model.params().find("density.log_variance")};
  for (const auto& l : leaves) REQUIRE(l);
  auto res = grad_check(leaves, build, 1e-5, 4);
  CHECK(res.checked >= 17);
  CHECK(res.max_rel_err < 1e-5);
}
