#include "semdistill/nn.hpp"

#include <cmath>

namespace semdistill::nn {

ad::Var ParamRegistry::add(const std::string& name, Tensor init) {
  if (find(name)) throw InvalidArgumentError("duplicate parameter name: " + name);
  ad::Var v = ad::leaf(std::move(init), true);
  items_.emplace_back(name, v);
  return v;
}

ad::Var ParamRegistry::find(const std::string& name) const {
  for (const auto& [n, v] : items_) {
    if (n == name) return v;
  }
  return nullptr;
}

int64_t ParamRegistry::total_params() const {
  int64_t n = 0;
  for (const auto& [name, v] : items_) n += v->value.size();
  return n;
}

void ParamRegistry::zero_grads() {
  for (auto& [name, v] : items_) v->zero_grad();
}

Tensor glorot_uniform(std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
  return t;
}

Dense::Dense(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t out, Rng& rng) {
  w = reg.add(prefix + ".w", glorot_uniform({in, out}, in, out, rng));
  b = reg.add(prefix + ".b", Tensor::zeros({out}));
}

ad::Var Dense::operator()(const ad::Var& x) const { return ad::add_rowvec(ad::matmul(x, w), b); }

Conv2dLayer::Conv2dLayer(ParamRegistry& reg, const std::string& prefix, int64_t cin, int64_t cout,
                         int64_t kernel, int64_t stride_, int64_t pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  int64_t fan_in = cin * kernel * kernel;
  int64_t fan_out = cout * kernel * kernel;
  w = reg.add(prefix + ".w", glorot_uniform({cout, cin, kernel, kernel}, fan_in, fan_out, rng));
  b = reg.add(prefix + ".b", Tensor::zeros({cout}));
}

ad::Var Conv2dLayer::operator()(const ad::Var& x) const {
  return ad::conv2d(x, w, b, stride, pad);
}

LayerNormLayer::LayerNormLayer(ParamRegistry& reg, const std::string& prefix, int64_t dim) {
  gamma = reg.add(prefix + ".gamma", Tensor::full({dim}, 1.0));
  beta = reg.add(prefix + ".beta", Tensor::zeros({dim}));
}

ad::Var LayerNormLayer::operator()(const ad::Var& x) const {
  return ad::layer_norm(x, gamma, beta);
}

Mhsa::Mhsa(ParamRegistry& reg, const std::string& prefix, int64_t dim_, int64_t heads_, Rng& rng)
    : dim(dim_), heads(heads_) {
  if (dim % heads != 0) throw InvalidArgumentError("attention dim must divide by head count");
  qkv = Dense(reg, prefix + ".qkv", dim, 3 * dim, rng);
  proj = Dense(reg, prefix + ".proj", dim, dim, rng);
}

ad::Var Mhsa::forward(const ad::Var& tokens, int64_t n, int64_t l) const {
  const int64_t dh = dim / heads;
  ad::Var qkv_out = qkv(tokens);  // [N*L, 3*dim]
  ad::Var q = ad::split_heads(ad::slice_cols(qkv_out, 0, dim), n, l, heads);
  ad::Var k = ad::split_heads(ad::slice_cols(qkv_out, dim, dim), n, l, heads);
  ad::Var v = ad::split_heads(ad::slice_cols(qkv_out, 2 * dim, dim), n, l, heads);
  ad::Var att = ad::softmax_last(ad::scale(ad::bmm_nt(q, k), 1.0 / std::sqrt(double(dh))));
  ad::Var ctx = ad::merge_heads(ad::bmm(att, v), n, l, heads);
  return proj(ctx);
}

TransformerBlock::TransformerBlock(ParamRegistry& reg, const std::string& prefix, int64_t dim,
                                   int64_t heads, int64_t mlp_ratio, Rng& rng) {
  ln1 = LayerNormLayer(reg, prefix + ".ln1", dim);
  attn = Mhsa(reg, prefix + ".attn", dim, heads, rng);
  ln2 = LayerNormLayer(reg, prefix + ".ln2", dim);
  fc1 = Dense(reg, prefix + ".fc1", dim, dim * mlp_ratio, rng);
  fc2 = Dense(reg, prefix + ".fc2", dim * mlp_ratio, dim, rng);
}

ad::Var TransformerBlock::forward(const ad::Var& tokens, int64_t n, int64_t l) const {
  ad::Var x = ad::add(tokens, attn.forward(ln1(tokens), n, l));
  return ad::add(x, fc2(ad::gelu(fc1(ln2(x)))));
}

Adam::Adam(ParamRegistry& reg, AdamConfig cfg) : reg_(reg), cfg_(cfg) {
  for (const auto& [name, v] : reg_.items()) {
    m_.push_back(Tensor::zeros(v->value.shape()));
    v_.push_back(Tensor::zeros(v->value.shape()));
  }
}

double Adam::current_lr() const {
  if (cfg_.total_steps <= 0) return cfg_.lr;
  double frac = std::min(1.0, double(t_) / double(cfg_.total_steps));
  double floor_lr = cfg_.lr * cfg_.min_lr_frac;
  return floor_lr + (cfg_.lr - floor_lr) * 0.5 * (1.0 + std::cos(frac * M_PI));
}

void Adam::step() {
  const double lr = current_lr();
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  const auto& items = reg_.items();
  for (size_t p = 0; p < items.size(); ++p) {
    ad::Node& node = *items[p].second;
    if (!node.grad_ready) continue;
    Tensor& g = node.grad;
    Tensor& m = m_[p];
    Tensor& v = v_[p];
    double* pv = node.value.data();
    for (int64_t i = 0; i < g.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      pv[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
  reg_.zero_grads();
}

}  // namespace semdistill::nn
