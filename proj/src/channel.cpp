#include "semdistill/channel.hpp"

#include <cmath>

namespace semdistill {

double snr_to_noise_variance(double snr_db, double signal_power) {
  if (!(signal_power > 0.0)) {
    throw InvalidArgumentError("snr_to_noise_variance: signal power must be positive");
  }
  return signal_power * std::pow(10.0, -snr_db / 10.0);
}

ChannelState awgn_state(double snr_db, double signal_power) {
  ChannelState s;
  s.snr_db = std::min(snr_db, kMaxSnrDb);
  s.noise_variance = snr_to_noise_variance(s.snr_db, signal_power);
  s.gain = 1.0;
  return s;
}

Tensor normalize_power(const Tensor& x) {
  double mean_sq = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) mean_sq += x[i] * x[i];
  mean_sq /= double(x.size());
  if (mean_sq == 0.0) {
    throw DegenerateInputError("power normalization of an all-zero feature");
  }
  double s = 1.0 / std::sqrt(mean_sq);
  Tensor out = x;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  return out;
}

Tensor apply_awgn(const Tensor& x, const ChannelState& state, Rng& rng) {
  if (state.noise_variance < 0.0) {
    throw InvalidArgumentError("apply_awgn: negative noise variance");
  }
  Tensor out = x;
  if (state.gain != 1.0) {
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= state.gain;
  }
  if (state.noise_variance == 0.0) return out;
  const double sigma = std::sqrt(state.noise_variance);
  for (int64_t i = 0; i < out.size(); ++i) out[i] += sigma * rng.normal();
  return out;
}

double sample_snr(const SnrRange& range, Rng& rng) {
  if (range.low_db > range.high_db) {
    throw InvalidArgumentError("sample_snr: low_db must not exceed high_db");
  }
  return rng.uniform(range.low_db, range.high_db);
}

}  // namespace semdistill
