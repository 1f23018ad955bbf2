#ifndef SEMDISTILL_NN_HPP
#define SEMDISTILL_NN_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "semdistill/autodiff.hpp"
#include "semdistill/common.hpp"

namespace semdistill::nn {

// Named, ordered collection of trainable leaves. Order is creation order and
// fixes the checkpoint and optimizer-state layout.
class ParamRegistry {
 public:
  ad::Var add(const std::string& name, Tensor init);
  const std::vector<std::pair<std::string, ad::Var>>& items() const { return items_; }
  // Null Var when missing.
  ad::Var find(const std::string& name) const;
  int64_t total_params() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, ad::Var>> items_;
};

Tensor glorot_uniform(std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out, Rng& rng);

// y = x W + b with W of shape [in, out].
class Dense {
 public:
  Dense() = default;
  Dense(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t out, Rng& rng);
  ad::Var operator()(const ad::Var& x) const;
  ad::Var w, b;
};

class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(ParamRegistry& reg, const std::string& prefix, int64_t cin, int64_t cout,
              int64_t kernel, int64_t stride, int64_t pad, Rng& rng);
  ad::Var operator()(const ad::Var& x) const;
  ad::Var w, b;
  int64_t stride = 1, pad = 0;
};

class LayerNormLayer {
 public:
  LayerNormLayer() = default;
  LayerNormLayer(ParamRegistry& reg, const std::string& prefix, int64_t dim);
  ad::Var operator()(const ad::Var& x) const;
  ad::Var gamma, beta;
};

// Multi-head self-attention over token rows [N*L, dim].
class Mhsa {
 public:
  Mhsa() = default;
  Mhsa(ParamRegistry& reg, const std::string& prefix, int64_t dim, int64_t heads, Rng& rng);
  ad::Var forward(const ad::Var& tokens, int64_t n, int64_t l) const;
  Dense qkv, proj;
  int64_t dim = 0, heads = 1;
};

// Pre-norm block: x + attn(ln1(x)), then x + mlp(ln2(x)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamRegistry& reg, const std::string& prefix, int64_t dim, int64_t heads,
                   int64_t mlp_ratio, Rng& rng);
  ad::Var forward(const ad::Var& tokens, int64_t n, int64_t l) const;
  LayerNormLayer ln1, ln2;
  Mhsa attn;
  Dense fc1, fc2;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Cosine decay from lr to lr*min_lr_frac over total_steps; constant when
  // total_steps == 0.
  int64_t total_steps = 0;
  double min_lr_frac = 0.01;
};

class Adam {
 public:
  Adam(ParamRegistry& reg, AdamConfig cfg);
  // Applies one update from the accumulated grads, then clears them.
  void step();
  double current_lr() const;
  int64_t steps_taken() const { return t_; }

 private:
  ParamRegistry& reg_;
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace semdistill::nn

#endif  // SEMDISTILL_NN_HPP
