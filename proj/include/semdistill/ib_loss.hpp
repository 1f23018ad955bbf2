#ifndef SEMDISTILL_IB_LOSS_HPP
#define SEMDISTILL_IB_LOSS_HPP

#include <vector>

#include "semdistill/autodiff.hpp"
#include "semdistill/common.hpp"
#include "semdistill/tensor.hpp"

namespace semdistill {

// Diagonal Gaussian centered at the deterministic encoder output, with one
// learned log-variance scalar shared across dimensions.
struct StochasticEncoderDensity {
  Tensor mean;
  double log_variance = 0.0;
};

// Sum over elements of the diagonal-Gaussian log density of x.
double gaussian_log_density(const Tensor& x, const StochasticEncoderDensity& density);

// Monte Carlo mutual-information upper bound over a batch: the mean
// positive-diagonal log density minus the all-pairs average. means and
// samples are [N, D]; row n of samples is the draw for row n of means.
// Computed in the algebraically identical per-pair difference form, which is
// exactly zero for N == 1 and whenever the density ignores its input.
double mi_upper_bound(const Tensor& means, const Tensor& samples, double log_variance);

// -sum_c y_hat[c] * log max(p[c], 1e-12).
double soft_cross_entropy(const std::vector<double>& p, const std::vector<double>& y_hat);

struct LossBreakdown {
  double rate = 0.0;        // MI upper bound
  double distortion = 0.0;  // mean soft cross-entropy over the batch
  double total = 0.0;       // rate_weight * rate + beta * distortion
  double beta = 0.0;
  double rate_weight = 1.0;  // warmup scaling of the rate term, 1 = full
};

// ---- differentiable graph builders ----

// means + exp(log_var/2) * eps, with eps entering as a constant.
ad::Var reparameterize(const ad::Var& means, const ad::Var& log_var, const Tensor& eps);

ad::Var mi_upper_bound_graph(const ad::Var& means, const ad::Var& samples,
                             const ad::Var& log_var);

// Mean over rows of -sum_c y_hat[n][c] * log max(p[n][c], 1e-12).
ad::Var soft_cross_entropy_graph(const ad::Var& probs, const Tensor& y_hat);

struct LossGraph {
  ad::Var rate;
  ad::Var distortion;
  ad::Var total;
  LossBreakdown breakdown(double beta, double rate_weight = 1.0) const;
};

// total = rate_weight * rate + beta * distortion.  rate_weight below 1
// implements rate warmup: the trainer ramps it 0 -> 1 so the code forms
// before the full bottleneck pressure lands.  At 1.0 (the default) the
// term is used unscaled and the arithmetic is identical to not scaling.
LossGraph distillation_loss_graph(const ad::Var& means, const ad::Var& samples,
                                  const ad::Var& log_var, const ad::Var& probs,
                                  const Tensor& y_hat, double beta, double rate_weight = 1.0);

}  // namespace semdistill

#endif  // SEMDISTILL_IB_LOSS_HPP
