#include "semdistill/ib_loss.hpp"

#include <cmath>

namespace semdistill {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kProbFloor = 1e-12;
}  // namespace

double gaussian_log_density(const Tensor& x, const StochasticEncoderDensity& density) {
  require_same_shape(x, density.mean, "gaussian_log_density");
  const double variance = std::exp(density.log_variance);
  if (!(variance > 0.0)) {
    throw InvalidArgumentError("gaussian_log_density: variance must be positive");
  }
  const int64_t d = x.size();
  double quad = 0.0;
  for (int64_t i = 0; i < d; ++i) {
    double diff = x[i] - density.mean[i];
    quad += diff * diff;
  }
  return -0.5 * double(d) * (kLog2Pi + density.log_variance) - quad / (2.0 * variance);
}

double mi_upper_bound(const Tensor& means, const Tensor& samples, double log_variance) {
  if (means.rank() != 2 || samples.rank() != 2 || !means.same_shape(samples)) {
    throw ShapeError("mi_upper_bound: means and samples must both be [N,D]");
  }
  const int64_t n = means.dim(0), d = means.dim(1);
  if (n < 1) throw InvalidArgumentError("mi_upper_bound: empty batch");
  const double variance = std::exp(log_variance);
  if (!(variance > 0.0)) {
    throw InvalidArgumentError("mi_upper_bound: variance must be positive");
  }
  // (1/N) sum_n log p(x_n|i_n) - (1/N^2) sum_n sum_j log p(x_n|i_j)
  //   = -k/N^2 * sum_n sum_j (S[n][n] - S[n][j]),  k = 1/(2 var),
  // since the normalization constants cancel pairwise. The difference form
  // gives an exact zero when row entries equal the diagonal bit-for-bit.
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = samples.data() + i * d;
    const double* mi_row = means.data() + i * d;
    double diag = 0.0;
    for (int64_t t = 0; t < d; ++t) {
      double diff = xi[t] - mi_row[t];
      diag += diff * diff;
    }
    for (int64_t j = 0; j < n; ++j) {
      const double* mj = means.data() + j * d;
      double s = 0.0;
      for (int64_t t = 0; t < d; ++t) {
        double diff = xi[t] - mj[t];
        s += diff * diff;
      }
      acc += diag - s;
    }
  }
  return -acc / (2.0 * variance * double(n) * double(n));
}

double soft_cross_entropy(const std::vector<double>& p, const std::vector<double>& y_hat) {
  if (p.size() != y_hat.size()) {
    throw ShapeError("soft_cross_entropy: length mismatch " + std::to_string(p.size()) + " vs " +
                     std::to_string(y_hat.size()));
  }
  double sp = 0.0, sy = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    sp += p[i];
    sy += y_hat[i];
  }
  if (std::abs(sp - 1.0) > 1e-5 || std::abs(sy - 1.0) > 1e-5) {
    throw InvalidArgumentError("soft_cross_entropy: inputs must be unit-sum distributions");
  }
  double ce = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    ce -= y_hat[i] * std::log(std::max(p[i], kProbFloor));
  }
  return ce;
}

ad::Var reparameterize(const ad::Var& means, const ad::Var& log_var, const Tensor& eps) {
  require_same_shape(means->value, eps, "reparameterize");
  ad::Var sigma = ad::exp_of(ad::scale(log_var, 0.5));
  return ad::add(means, ad::mul_scalar_var(ad::constant(eps), sigma));
}

ad::Var mi_upper_bound_graph(const ad::Var& means, const ad::Var& samples,
                             const ad::Var& log_var) {
  const auto& shape = means->value.shape();
  if (shape.size() != 2 || !samples->value.same_shape(means->value)) {
    throw ShapeError("mi_upper_bound_graph: means and samples must both be [N,D]");
  }
  const int64_t n = shape[0];
  if (n < 1) throw InvalidArgumentError("mi_upper_bound_graph: empty batch");
  ad::Var sq = ad::sqdist_matrix(samples, means);
  ad::Var diff = ad::diag_minus_bcast(sq);
  ad::Var scaled = ad::scale(ad::sum_all(diff), -1.0 / (double(n) * double(n)));
  // k = 1/(2 var) = exp(-log_var)/2, applied as a scalar product so the
  // learned log-variance receives its gradient.
  ad::Var k = ad::scale(ad::exp_of(ad::neg(log_var)), 0.5);
  return ad::mul_scalar_var(scaled, k);
}

ad::Var soft_cross_entropy_graph(const ad::Var& probs, const Tensor& y_hat) {
  require_same_shape(probs->value, y_hat, "soft_cross_entropy_graph");
  if (probs->value.rank() != 2) {
    throw ShapeError("soft_cross_entropy_graph: expected [N,C] probabilities");
  }
  const int64_t n = probs->value.dim(0);
  ad::Var logs = ad::log_of(ad::clamp_min(probs, kProbFloor));
  ad::Var weighted = ad::mul(logs, ad::constant(y_hat));
  return ad::scale(ad::sum_all(weighted), -1.0 / double(n));
}

LossBreakdown LossGraph::breakdown(double beta, double rate_weight) const {
  LossBreakdown b;
  b.rate = rate->value[0];
  b.distortion = distortion->value[0];
  b.total = total->value[0];
  b.beta = beta;
  b.rate_weight = rate_weight;
  return b;
}

LossGraph distillation_loss_graph(const ad::Var& means, const ad::Var& samples,
                                  const ad::Var& log_var, const ad::Var& probs,
                                  const Tensor& y_hat, double beta, double rate_weight) {
  if (!(beta >= 0.0)) throw InvalidArgumentError("distillation loss: beta must be >= 0");
  if (!(rate_weight >= 0.0)) {
    throw InvalidArgumentError("distillation loss: rate_weight must be >= 0");
  }
  if (means->value.dim(0) != probs->value.dim(0)) {
    throw ShapeError("distillation loss: batch size mismatch between features and outputs");
  }
  LossGraph g;
  g.rate = mi_upper_bound_graph(means, samples, log_var);
  g.distortion = soft_cross_entropy_graph(probs, y_hat);
  // Bypass the no-op scale so a full-weight run builds the exact graph it
  // always has, node for node.
  ad::Var weighted_rate = rate_weight == 1.0 ? g.rate : ad::scale(g.rate, rate_weight);
  g.total = ad::add(weighted_rate, ad::scale(g.distortion, beta));
  return g;
}

}  // namespace semdistill
