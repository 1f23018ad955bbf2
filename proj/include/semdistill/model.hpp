#ifndef SEMDISTILL_MODEL_HPP
#define SEMDISTILL_MODEL_HPP

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "semdistill/channel.hpp"
#include "semdistill/nn.hpp"

namespace semdistill {

struct EncoderConfig {
  int64_t in_channels = 3;
  int64_t in_h = 32;
  int64_t in_w = 32;
  // Channel widths of the four attention stages.
  std::vector<int64_t> stage_widths = {32, 48, 64, 96};
  int64_t heads = 2;
  int64_t mlp_ratio = 2;
  int64_t decoder_hidden = 128;
  // 0 means "same as the feature channel count".
  int64_t adapt_hidden = 0;
  int64_t class_count = 10;

  void validate() const;
  // Two stride-2 convolutions with kernel 3 / padding 1 halve (rounding up)
  // each spatial dimension twice.
  int64_t feature_h() const { return (in_h + 3) / 4; }
  int64_t feature_w() const { return (in_w + 3) / 4; }
  int64_t feature_channels() const { return stage_widths.back(); }
  int64_t feature_dim() const { return feature_channels() * feature_h() * feature_w(); }
};

// Lightweight four-stage attention codec with a channel-adaptive gate.
class StudentModel {
 public:
  StudentModel(EncoderConfig cfg, uint64_t seed);

  // [N, Cin, H, W] -> raw feature [N, Cf, h, w].
  ad::Var encode(const ad::Var& images) const;
  // Pooled feature + scaled SNR through two dense layers and a sigmoid.
  ad::Var adapt_weights(const ad::Var& x0, double snr_db) const;
  // Channel-wise gating, Hadamard per channel.
  ad::Var apply_weights(const ad::Var& x0, const ad::Var& w) const;
  // Received feature [N, Cf, h, w] -> class probabilities [N, C].
  ad::Var decode(const ad::Var& xp) const;

  // Full differentiable pipeline. Noise is sampled once from rng and enters
  // the graph as a constant, so gradients flow via reparameterization.
  struct Graph {
    ad::Var x0;       // raw feature [N, Cf, h, w]
    ad::Var weights;  // adaptive gate [N, Cf]
    ad::Var x_rows;   // transmitted rows [N, D], unit mean-square power
    ad::Var xp;       // received feature [N, Cf, h, w]
    ad::Var probs;    // [N, C]
  };
  // adaptive_gate=false ablates the conditioning module: the gate is pinned
  // to all-ones and its parameters receive no gradient.
  Graph forward_graph(const Tensor& images, double snr_db, const ChannelState& state,
                      Rng& noise_rng, bool adaptive_gate = true) const;

  // Channel bypass (no power normalization, no noise): decode(encode*gate).
  ad::Var forward_bypass(const Tensor& images, double snr_db) const;

  struct ForwardResult {
    Tensor probs, x0, weights, x_rows, xp;
  };
  // Convenience non-graph forward for evaluation.
  ForwardResult student_forward(const Tensor& images, double snr_db, const ChannelState& state,
                                Rng& noise_rng, bool adaptive_gate = true) const;

  // Log-variance of the stochastic encoder density (scalar, learned).
  ad::Var log_variance() const { return log_variance_; }

  nn::ParamRegistry& params() { return params_; }
  const nn::ParamRegistry& params() const { return params_; }
  const EncoderConfig& config() const { return cfg_; }
  int64_t count_params() const { return params_.total_params(); }

 private:
  EncoderConfig cfg_;
  nn::ParamRegistry params_;
  nn::Conv2dLayer patch1_, patch2_;
  ad::Var pos_embed_;
  std::vector<nn::Dense> stage_proj_;  // width change before a stage (maybe null)
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNormLayer final_ln_;
  nn::Dense adapt_fc1_, adapt_fc2_;
  nn::Dense dec_fc1_, dec_fc2_;
  ad::Var log_variance_;
};

// Serialized as a JSON manifest (config + parameter table) followed by the
// raw little-endian doubles of every parameter in registry order.
void save_checkpoint(const std::string& path, const StudentModel& model);
std::unique_ptr<StudentModel> load_checkpoint(const std::string& path);

// Median milliseconds per call over `reps` timed repetitions after `warmup`
// untimed ones.
double measure_latency(const std::function<void()>& fn, int warmup, int reps);

}  // namespace semdistill

#endif  // SEMDISTILL_MODEL_HPP
